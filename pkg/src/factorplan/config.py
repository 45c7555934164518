"""Run configuration: JSON file plus ``key=value`` overrides, validated up front."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .planner import StageConfig
from .scene import KINDS
from .teacher import MetricThresholds
from .train import CandidateConfig, TrainConfig
from .trajectory import FactorizationConfig

CONFIG_SCHEMA = "config/v1"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schema: str = CONFIG_SCHEMA
    out: str = "runs/default"
    seed: int = 0
    # scenario corpus
    count: int = 120
    test_count: int = 60
    kinds: list = field(default_factory=lambda: list(KINDS))
    snapshot_every: float = 2.0
    perturb_speed: float = 1.0
    dataset: str | None = None
    test_dataset: str | None = None
    # factorization and vocabulary
    ds: float = 1.0
    s_max: float = 50.0
    dt: float = 0.5
    T: int = 8
    N_p: int = 64
    N_v: int = 16
    kmeans_iters: int = 100
    vocab: str | None = None
    # scorer
    d: int = 32
    heads: int = 2
    hidden: int = 64
    sigma: float = 3.0
    sink: bool = True
    path_interaction: str = "deformable"
    lambda_p: float = 1.0
    lambda_v: float = 1.0
    lambda_tau: float = 1.0
    alpha: float = 1.0
    # training
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    near_paths: int = 6
    random_paths: int = 6
    near_vels: int = 3
    random_vels: int = 3
    labels: str | None = None
    checkpoint: str | None = None
    untrained: bool = False
    # planner
    stages: list = field(default_factory=lambda: [[16, 8], [8, 4]])
    beta: float = 0.0
    # teacher thresholds
    ttc_horizon: float = 1.0
    max_abs_accel: float = 3.0
    max_abs_jerk: float = 5.0
    max_lat_accel: float = 4.0
    lk_margin: float = 0.5
    # closed loop
    replan_hz: float = 2.0
    sim_dt: float = 0.1
    sim_kinds: list = field(default_factory=lambda: ["lead-vehicle-brake", "empty-road"])
    sim_count: int = 20
    write_traces: bool = False
    # scaling study
    ladder: list = field(default_factory=lambda: [[16, 8], [32, 16], [64, 16], [128, 32], [256, 64]])
    scaling_seeds: list = field(default_factory=lambda: [0, 1, 2])

    # -- derived configs --------------------------------------------------
    def factorization(self) -> FactorizationConfig:
        return FactorizationConfig(self.ds, self.s_max, self.dt, self.T)

    def model(self) -> ModelConfig:
        return ModelConfig(d=self.d, heads=self.heads, hidden=self.hidden, sigma=self.sigma, sink=self.sink,
                           path_interaction=self.path_interaction, lambda_p=self.lambda_p,
                           lambda_v=self.lambda_v, lambda_tau=self.lambda_tau, alpha=self.alpha)

    def training(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr, seed=self.seed)

    def candidates(self) -> CandidateConfig:
        return CandidateConfig(self.near_paths, self.random_paths, self.near_vels, self.random_vels)

    def stage_config(self) -> StageConfig:
        return StageConfig(tuple(tuple(s) for s in self.stages))

    def thresholds(self) -> MetricThresholds:
        return MetricThresholds(self.ttc_horizon, self.max_abs_accel, self.max_abs_jerk, self.max_lat_accel,
                                self.lk_margin)

    def validate(self) -> "RunConfig":
        if self.schema != CONFIG_SCHEMA:
            raise ConfigError(f"config schema {self.schema!r} != {CONFIG_SCHEMA}")
        for name in ("count", "test_count", "N_p", "N_v", "sim_count", "kmeans_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        bad = set(self.kinds) - set(KINDS) | set(self.sim_kinds) - set(KINDS)
        if bad:
            raise ConfigError(f"unknown scenario kinds {sorted(bad)}")
        if any(len(p) != 2 for p in self.ladder):
            raise ConfigError("ladder entries must be [N_p, N_v] pairs")
        try:
            self.factorization()
            self.model()
            self.training()
            self.stage_config()
            self.thresholds()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a JSON config (if given) and apply ``key=value`` overrides; unknown keys are errors."""
    known = {f.name for f in fields(RunConfig)}
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        doc[k.strip()] = _parse_value(v)
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return RunConfig(**doc).validate()
