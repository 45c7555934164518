"""Demonstration datasets: expert rollouts sampled into planning snapshots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expert import ExpertPlanner, expert_plan
from .scene import KINDS, EgoState, ScenarioScript, generate, script_from_dict, script_to_dict
from .sim import default_episode_length, run_episode
from .trajectory import FactorizationConfig, Trajectory

DEMO_SCHEMA = "demos/v1"


@dataclass(frozen=True)
class DatasetConfig:
    count: int = 100
    seed: int = 0
    kinds: tuple = KINDS
    snapshot_every: float = 2.0
    perturb_lateral: float = 0.5
    perturb_heading: float = 0.05
    perturb_speed: float = 1.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        bad = set(self.kinds) - set(KINDS)
        if bad:
            raise ValueError(f"unknown scenario kinds {sorted(bad)}")
        if self.snapshot_every <= 0:
            raise ValueError("snapshot_every must be positive")
        if min(self.perturb_lateral, self.perturb_heading, self.perturb_speed) < 0:
            raise ValueError("perturbation ranges must be non-negative")


@dataclass(frozen=True, eq=False)
class Sample:
    """One planning problem: a script, a time and the ego pose, plus the expert's answer."""

    script: ScenarioScript
    t0: float
    ego: EgoState  # world frame
    expert: np.ndarray  # (T, 2) ego-frame waypoints
    reference: np.ndarray  # ego-frame reference geometry, longer than the path horizon
    dt: float = 0.5

    @property
    def expert_trajectory(self) -> Trajectory:
        return Trajectory(self.expert, self.dt)


@dataclass
class ScenarioRecord:
    script: ScenarioScript
    samples: list = field(default_factory=list)


def scenario_plan(cfg: DatasetConfig) -> list[tuple[str, int]]:
    """(kind, seed) for every scenario, kinds cycling in order."""
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**31 - 1, size=cfg.count)
    return [(cfg.kinds[k % len(cfg.kinds)], int(s)) for k, s in enumerate(seeds)]


def snapshot_samples(script: ScenarioScript, cfg: DatasetConfig, fcfg: FactorizationConfig | None = None,
                     times=None) -> list[Sample]:
    """Roll the expert out, then re-plan from perturbed copies of its states."""
    fcfg = fcfg or FactorizationConfig()
    planner = ExpertPlanner(fcfg)
    length = default_episode_length(script)
    rep = run_episode(script, planner, episode_length=length, route_length=1.0, stop_on_collision=False)
    if times is None:
        times = np.arange(0.0, length - 1e-9, cfg.snapshot_every)
    rng = np.random.default_rng([script.seed, 7])
    out = []
    for t0 in times:
        row = rep.trace[int(round(t0 / 0.1))]
        x, y, h, v = row[1:5]
        dl = rng.uniform(-cfg.perturb_lateral, cfg.perturb_lateral)
        dh = rng.uniform(-cfg.perturb_heading, cfg.perturb_heading)
        dv = rng.uniform(-cfg.perturb_speed, cfg.perturb_speed)
        ego = EgoState(x - dl * np.sin(h), y + dl * np.cos(h), h + dh, max(0.0, v + dv))
        plan = expert_plan(script, float(t0), ego, fcfg)
        out.append(Sample(script, float(t0), ego, plan.trajectory.waypoints.copy(), plan.reference, fcfg.dt))
    return out


def generate_dataset(cfg: DatasetConfig, fcfg: FactorizationConfig | None = None) -> list[ScenarioRecord]:
    records = []
    for kind, seed in scenario_plan(cfg):
        script = generate(kind, seed)
        records.append(ScenarioRecord(script, snapshot_samples(script, cfg, fcfg)))
    return records


def flatten(records) -> list[Sample]:
    return [s for r in records for s in r.samples]


def _round(a, nd=9):
    return np.round(np.asarray(a, dtype=np.float64), nd).tolist()


def record_to_json(rec: ScenarioRecord) -> str:
    doc = {
        "schema": DEMO_SCHEMA,
        "script": script_to_dict(rec.script),
        "demos": [
            {"t0": s.t0, "ego": [s.ego.x, s.ego.y, s.ego.heading, s.ego.speed], "dt": s.dt,
             "expert": _round(s.expert), "reference": _round(s.reference)}
            for s in rec.samples
        ],
    }
    return json.dumps(doc, sort_keys=True)


def record_from_json(line: str) -> ScenarioRecord:
    doc = json.loads(line)
    if doc.get("schema") != DEMO_SCHEMA:
        raise ValueError(f"demo schema {doc.get('schema')!r} != {DEMO_SCHEMA}")
    script = script_from_dict(doc["script"])
    samples = [
        Sample(script, d["t0"], EgoState(*d["ego"]), np.array(d["expert"]), np.array(d["reference"]), d["dt"])
        for d in doc["demos"]
    ]
    return ScenarioRecord(script, samples)


def save_dataset(records, path) -> None:
    Path(path).write_text("".join(record_to_json(r) + "\n" for r in records))


def load_dataset(path) -> list[ScenarioRecord]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return [record_from_json(ln) for ln in lines]


def path_demos(samples) -> list[Trajectory]:
    """Reference geometries as polylines for path clustering."""
    return [Trajectory(s.reference, s.dt) for s in samples]
