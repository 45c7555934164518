"""Training-set preparation, teacher-label caching and the Adam training loop."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    Batch,
    ModelConfig,
    ModelParams,
    Targets,
    TokenInputs,
    forward,
    init_params,
    loss_total,
    path_distances,
    path_inputs,
    rbf_weights,
    tokenize,
    trajectory_distances,
    velocity_distances,
    velocity_inputs,
)
from .scene import local_view, script_to_dict
from .teacher import MetricThresholds, teach_arrays
from .trajectory import FactorizationConfig, resample_path, step_speeds

LABEL_SCHEMA = "labels/v1"


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class CandidateConfig:
    """Fine candidates used for supervision: nearest-to-expert plus seeded random anchors."""

    near_paths: int = 6
    random_paths: int = 6
    near_vels: int = 3
    random_vels: int = 3

    @property
    def per_scene(self) -> int:
        return (self.near_paths + self.random_paths) * (self.near_vels + self.random_vels)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("invalid training configuration")


# -- per-scene preparation ----------------------------------------------------

def scene_tokens(sample, mcfg: ModelConfig) -> TokenInputs:
    return tokenize(local_view(sample.script, sample.t0, sample.ego), mcfg.map_spacing)


def token_positions(ti: TokenInputs, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    pos = ti.positions
    if cfg.sink:
        pos = np.vstack([pos, [np.inf, np.inf]])
    return pos, np.ones(len(pos), dtype=bool)


def pick_candidates(d_path, d_vel, ccfg: CandidateConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    def pick(d, near, rand):
        order = np.argsort(d, kind="stable")
        near = min(near, len(d))
        rest = order[near:]
        extra = rng.choice(rest, size=min(rand, len(rest)), replace=False) if len(rest) else []
        return np.sort(np.concatenate([order[:near], extra]).astype(int))

    pi = pick(d_path, ccfg.near_paths, ccfg.random_paths)
    vj = pick(d_vel, ccfg.near_vels, ccfg.random_vels)
    ii, jj = np.meshgrid(pi, vj, indexing="ij")
    return ii.reshape(-1), jj.reshape(-1)


def sample_key(sample, cand_i, cand_j, vocab_digest: str) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(script_to_dict(sample.script), sort_keys=True).encode())
    h.update(np.array([sample.t0, sample.ego.x, sample.ego.y, sample.ego.heading, sample.ego.speed]).tobytes())
    h.update(vocab_digest.encode())
    h.update(np.asarray(cand_i, dtype=np.int64).tobytes())
    h.update(np.asarray(cand_j, dtype=np.int64).tobytes())
    return h.hexdigest()


def vocab_digest(vocab) -> str:
    h = hashlib.sha256()
    for a in (vocab.paths.points, vocab.paths.valid_mask.astype(np.uint8), vocab.velocities.speeds):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class LabelCache:
    """Teacher labels keyed by (scenario hash, candidate identity).

    Persisted as JSON lines; float values are written with ``repr`` so a
    rebuild from the same inputs is byte-identical.
    """

    def __init__(self, entries: dict | None = None, meta: dict | None = None):
        self.entries = dict(entries or {})
        self.meta = dict(meta or {})
        self.hits = 0
        self.misses = 0

    def get_or_compute(self, key: str, fn, meta: dict | None = None) -> np.ndarray:
        if key in self.entries:
            self.hits += 1
            return self.entries[key]
        self.misses += 1
        val = np.asarray(fn(), dtype=np.float64)
        self.entries[key] = val
        self.meta[key] = meta or {}
        return val

    def save(self, path) -> None:
        lines = []
        for k in sorted(self.entries):
            doc = {"schema": LABEL_SCHEMA, "key": k, **self.meta.get(k, {}),
                   "labels": [[float(x) for x in row] for row in self.entries[k]]}
            lines.append(json.dumps(doc, sort_keys=True))
        Path(path).write_text("".join(ln + "\n" for ln in lines))

    @classmethod
    def load(cls, path) -> "LabelCache":
        entries, meta = {}, {}
        for ln in Path(path).read_text().splitlines():
            if not ln.strip():
                continue
            doc = json.loads(ln)
            if doc.get("schema") != LABEL_SCHEMA:
                raise ValueError(f"label cache schema {doc.get('schema')!r} != {LABEL_SCHEMA}")
            k = doc.pop("key")
            entries[k] = np.array(doc.pop("labels"), dtype=np.float64)
            doc.pop("schema")
            meta[k] = doc
        return cls(entries, meta)


@dataclass
class TrainingSet:
    tok_raw: np.ndarray  # (n, M, F)
    tok_mask: np.ndarray  # (n, M)
    ego_raw: np.ndarray  # (n, 1)
    W_path: np.ndarray  # (n, N_p, M')
    W_tau: np.ndarray  # (n, C, M')
    cand_i: np.ndarray
    cand_j: np.ndarray
    d_path: np.ndarray
    path_weight: np.ndarray
    d_vel: np.ndarray
    d_traj: np.ndarray
    labels: np.ndarray  # (n, C, 6)
    path_in: np.ndarray  # (N_p, 3S) anchor encoder inputs
    vel_in: np.ndarray  # (N_v, T)

    def __len__(self):
        return len(self.tok_raw)

    def batch(self, idx) -> tuple[Batch, Targets]:
        idx = np.asarray(idx)
        b = Batch(self.tok_raw[idx], self.tok_mask[idx], self.ego_raw[idx], self.W_path[idx], self.W_tau[idx],
                  self.cand_i[idx], self.cand_j[idx])
        t = Targets(self.d_path[idx], self.path_weight[idx], self.d_vel[idx], self.d_traj[idx], self.labels[idx])
        return b, t


def build_training_set(samples, vocab, mcfg: ModelConfig, ccfg: CandidateConfig | None = None, seed: int = 0,
                       cache: LabelCache | None = None, th: MetricThresholds | None = None) -> TrainingSet:
    ccfg = ccfg or CandidateConfig()
    cache = cache if cache is not None else LabelCache()
    fcfg: FactorizationConfig = vocab.cfg
    digest = vocab_digest(vocab)
    rng = np.random.default_rng(seed)
    toks = [scene_tokens(s, mcfg) for s in samples]
    M = max(len(t.raw) for t in toks)
    Mp = M + (1 if mcfg.sink else 0)
    n, (n_p, n_v) = len(samples), vocab.shape
    C = ccfg.per_scene if ccfg.per_scene <= vocab.size else None
    out = {k: [] for k in ("tok_raw", "tok_mask", "ego_raw", "W_path", "W_tau", "cand_i", "cand_j", "d_path",
                           "path_weight", "d_vel", "d_traj", "labels")}
    for s, ti in zip(samples, toks):
        m = len(ti.raw)
        raw = np.zeros((M, ti.raw.shape[1]))
        raw[:m] = ti.raw
        mask = np.zeros(M, dtype=bool)
        mask[:m] = True
        cols = np.r_[np.arange(m), [M] if mcfg.sink else []].astype(int)
        pos, pmask = token_positions(ti, mcfg)

        gt_path = resample_path(s.expert, fcfg)
        gt_speed = step_speeds(s.expert, fcfg.dt)
        dp = path_distances(gt_path.points, gt_path.valid_mask, vocab.paths.points)
        dv = velocity_distances(gt_speed, vocab.velocities.speeds)
        ci, cj = pick_candidates(dp, dv, ccfg, rng)
        if C is not None and len(ci) != C:
            raise ValueError("candidate count varies across scenes")
        cands = vocab.compose_pairs(ci, cj)
        key = sample_key(s, ci, cj, digest)
        labels = cache.get_or_compute(
            key, lambda: teach_arrays(cands, s.script, s.t0, s.ego, fcfg.dt, th, reference=s.expert[None]),
            {"scenario_id": s.script.id, "t0": s.t0, "cand_i": ci.tolist(), "cand_j": cj.tolist()})

        wp = np.zeros((n_p, Mp))
        wp[:, cols] = rbf_weights(vocab.paths.points, vocab.paths.valid_mask, pos, pmask, mcfg)
        wt = np.zeros((len(ci), Mp))
        wt[:, cols] = rbf_weights(cands, np.ones(cands.shape[:2], dtype=bool), pos, pmask, mcfg)

        for k, v in (("tok_raw", raw), ("tok_mask", mask), ("ego_raw", ti.ego_raw), ("W_path", wp),
                     ("W_tau", wt), ("cand_i", ci), ("cand_j", cj), ("d_path", dp),
                     ("path_weight", float(gt_path.n_valid > 0)), ("d_vel", dv),
                     ("d_traj", trajectory_distances(s.expert, cands)), ("labels", labels)):
            out[k].append(v)
    arrays = {k: np.stack([np.asarray(x) for x in v]) for k, v in out.items()}
    return TrainingSet(**arrays, path_in=path_inputs(vocab.paths.points, vocab.paths.valid_mask),
                       vel_in=velocity_inputs(vocab.velocities.speeds))


# -- optimisation ---------------------------------------------------------------

class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.beta1 ** self.t
        b2t = 1.0 - c.beta2 ** self.t
        for k in sorted(params.arrays):
            g = grads[k]
            self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            params.arrays[k] = params.arrays[k] - c.lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + c.eps)


def loss_and_grads(params: ModelParams, batch: Batch, tg: Targets, path_in, vel_in):
    P = params.tensors()
    out = forward(P, params.cfg, batch, path_in, vel_in)
    total, bd = loss_total(out, tg, params.cfg)
    if not np.isfinite(bd.total):
        return bd, None
    total.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return bd, grads


def train(ts: TrainingSet, vocab, mcfg: ModelConfig, tcfg: TrainConfig | None = None,
          params: ModelParams | None = None, progress=None):
    """Returns (params, log rows of (step, l_path, l_vel, l_traj, l_metric, total))."""
    tcfg = tcfg or TrainConfig()
    fcfg = vocab.cfg
    params = params.copy() if params is not None else init_params(mcfg, fcfg.S, fcfg.horizon_T, tcfg.seed)
    opt = Adam(params, tcfg)
    rng = np.random.default_rng([tcfg.seed, 1])
    bs = min(tcfg.batch_size, len(ts))
    queue = np.zeros(0, dtype=int)
    log = []
    for step in range(tcfg.steps):
        if len(queue) < bs:
            queue = np.concatenate([queue, rng.permutation(len(ts))])
        idx, queue = queue[:bs], queue[bs:]
        batch, tg = ts.batch(idx)
        bd, grads = loss_and_grads(params, batch, tg, ts.path_in, ts.vel_in)
        if grads is None:
            raise TrainingDivergence(
                f"non-finite loss at step {step}: path={bd.l_path} vel={bd.l_vel} traj={bd.l_traj} "
                f"metric={bd.l_metric}")
        opt.step(params, grads)
        params.step += 1
        log.append(bd.row(step))
        if progress is not None:
            progress(step, bd)
    return params, log
