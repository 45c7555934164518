"""Path / velocity vocabularies built by K-Means, composed lazily."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .trajectory import (
    FactorizationConfig,
    GeometricPath,
    Trajectory,
    VelocityProfile,
    compose_arrays,
    extract_velocity,
    resample_path,
)

VOCAB_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, D)
    valid: np.ndarray  # (k, D) bool, union of member validity
    labels: np.ndarray  # (n,)
    cost_history: list[float] = field(default_factory=list)

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


def masked_sq_distances(x: np.ndarray, m: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Mean squared distance of each sample to each centroid over the sample's valid dims."""
    mf = m.astype(np.float64)
    xm = x * mf
    # sum_d m (x - c)^2 = sum m x^2 - 2 (m x).c + m.(c^2)
    sq = (xm * x).sum(1)[:, None] - 2.0 * xm @ c.T + mf @ (c * c).T
    return np.maximum(sq, 0.0) / mf.sum(1)[:, None]


def _plusplus_init(x, m, k, rng):
    n = len(x)
    first = int(rng.integers(n))
    cents = [x[first]]
    d = masked_sq_distances(x, m, x[first][None])[:, 0]
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            idx = 0  # every sample already sits on a centroid
        else:
            idx = int(rng.choice(n, p=d / total))
        cents.append(x[idx])
        d = np.minimum(d, masked_sq_distances(x, m, x[idx][None])[:, 0])
    return np.array(cents, dtype=np.float64)


def kmeans(samples, cfg: KMeansConfig, masks=None) -> KMeansResult:
    """Lloyd iterations under the masked mean-squared metric.

    Distances average over each sample's valid dims; centroid updates are the
    matching minimizer (per-dim mean weighted by 1 / #valid dims of the member).
    """
    x = np.asarray(samples, dtype=np.float64)
    n, D = x.shape
    m = np.ones_like(x, dtype=bool) if masks is None else np.asarray(masks, dtype=bool)
    if cfg.k > n:
        raise ConfigError(f"k={cfg.k} exceeds sample count {n}")
    if np.any(m.sum(1) == 0):
        raise ConfigError("every sample needs at least one valid dimension")
    rng = np.random.default_rng(cfg.seed)
    c = _plusplus_init(x, m, cfg.k, rng)
    w = (m / m.sum(1, keepdims=True)).astype(np.float64)  # per-member weights on valid dims
    labels = None
    history = []
    for _ in range(cfg.max_iters):
        dist = masked_sq_distances(x, m, c)
        new_labels = dist.argmin(1)
        history.append(float(dist[np.arange(n), new_labels].mean()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        c = _update(x, w, labels, c, dist)
        history.append(float(masked_sq_distances(x, m, c)[np.arange(n), labels].mean()))
    valid = np.zeros((cfg.k, D), dtype=bool)
    np.logical_or.at(valid, labels, m)
    return KMeansResult(c, valid, labels, history)


def _update(x, w, labels, c, dist):
    k = len(c)
    onehot = np.zeros((len(x), k))
    onehot[np.arange(len(x)), labels] = 1.0
    num = onehot.T @ (w * x)
    den = onehot.T @ w
    new = np.where(den > 0, num / np.where(den > 0, den, 1.0), c)
    counts = onehot.sum(0)
    if np.any(counts == 0):
        # empty clusters jump to the worst-served samples, lowest index first
        own = dist[np.arange(len(x)), labels]
        order = np.argsort(-own, kind="stable")
        taken = 0
        for j in np.flatnonzero(counts == 0):
            new[j] = x[order[taken]]
            taken += 1
    return new


@dataclass(frozen=True, eq=False)
class PathVocabulary:
    points: np.ndarray  # (N_p, S, 2)
    valid_mask: np.ndarray  # (N_p, S)
    cfg: FactorizationConfig
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def n_valid(self) -> np.ndarray:
        return self.valid_mask.sum(1)

    def anchor(self, i: int) -> GeometricPath:
        return GeometricPath(self.points[i], self.cfg.ds, self.valid_mask[i])


@dataclass(frozen=True, eq=False)
class VelocityVocabulary:
    speeds: np.ndarray  # (N_v, T)
    cfg: FactorizationConfig
    seed: int = 0

    @property
    def size(self) -> int:
        return len(self.speeds)

    def anchor(self, j: int) -> VelocityProfile:
        return VelocityProfile(self.speeds[j], self.cfg.dt)


@dataclass(frozen=True, eq=False)
class TrajectoryVocabulary:
    paths: PathVocabulary
    velocities: VelocityVocabulary

    @property
    def shape(self) -> tuple[int, int]:
        return self.paths.size, self.velocities.size

    @property
    def size(self) -> int:
        return self.paths.size * self.velocities.size

    @property
    def cfg(self) -> FactorizationConfig:
        return self.paths.cfg

    def entry(self, i: int, j: int) -> Trajectory:
        n_p, n_v = self.shape
        if not (0 <= i < n_p and 0 <= j < n_v):
            raise IndexError(f"entry ({i}, {j}) outside {n_p}x{n_v} vocabulary")
        return Trajectory(self.compose_pairs(np.array([i]), np.array([j]))[0], self.cfg.dt)

    def compose_pairs(self, i_idx, j_idx) -> np.ndarray:
        """Waypoints (..., T, 2) for index arrays of equal shape."""
        i_idx = np.asarray(i_idx)
        j_idx = np.asarray(j_idx)
        return compose_arrays(
            self.paths.points[i_idx], self.paths.n_valid[i_idx], self.cfg.ds,
            self.velocities.speeds[j_idx], self.cfg.dt,
        )

    def compose_block(self, i_idx) -> np.ndarray:
        """All velocity anchors against the given paths: (len(i_idx), N_v, T, 2)."""
        i_idx = np.asarray(i_idx)
        pts = self.paths.points[i_idx][:, None]
        nv = self.paths.n_valid[i_idx][:, None]
        return compose_arrays(pts, nv, self.cfg.ds, self.velocities.speeds[None], self.cfg.dt)


def _flatten_path(path: GeometricPath) -> tuple[np.ndarray, np.ndarray]:
    return path.points.reshape(-1), np.repeat(path.valid_mask, 2)


def build_path_vocab(demos, n_p: int, cfg: FactorizationConfig, kcfg: KMeansConfig | None = None) -> PathVocabulary:
    """Cluster demo paths; demos with no geometry (stationary) are skipped."""
    kcfg = kcfg or KMeansConfig(k=n_p)
    paths = [resample_path(d.waypoints, cfg) for d in demos]
    paths = [p for p in paths if p.n_valid > 0]
    if not paths:
        raise ConfigError("no demo covers any path distance")
    flat = [_flatten_path(p) for p in paths]
    x = np.stack([f[0] for f in flat])
    m = np.stack([f[1] for f in flat])
    res = kmeans(x, KMeansConfig(n_p, kcfg.max_iters, kcfg.seed), masks=m)
    S = cfg.S
    pts_out = np.zeros((n_p, S, 2))
    mask_out = np.zeros((n_p, S), dtype=bool)
    for i in range(n_p):
        valid_pts = res.valid[i].reshape(S, 2)[:, 0]
        cpts = res.centroids[i].reshape(S, 2)[valid_pts]
        # centroids of ds-spaced paths are not ds-spaced; re-walk them
        p = resample_path(cpts, cfg)
        pts_out[i] = p.points
        mask_out[i] = p.valid_mask
    return PathVocabulary(pts_out, mask_out, cfg, kcfg.seed)


def build_velocity_vocab(demos, n_v: int, cfg: FactorizationConfig, kcfg: KMeansConfig | None = None) -> VelocityVocabulary:
    kcfg = kcfg or KMeansConfig(k=n_v)
    x = np.stack([extract_velocity(d).speeds if isinstance(d, Trajectory) else np.asarray(d.speeds) for d in demos])
    if x.shape[1] != cfg.horizon_T:
        raise ConfigError(f"demo horizon {x.shape[1]} != configured {cfg.horizon_T}")
    res = kmeans(x, KMeansConfig(n_v, kcfg.max_iters, kcfg.seed))
    return VelocityVocabulary(np.maximum(res.centroids, 0.0), cfg, kcfg.seed)


def coverage_error(vocab: TrajectoryVocabulary, heldout, chunk: int = 64) -> dict:
    """min-ADE of each held-out trajectory against every vocabulary entry."""
    gts = np.stack([np.asarray(t.waypoints) for t in heldout])  # (H, T, 2)
    if len(gts) == 0:
        raise ValueError("held-out set is empty")
    best = np.full(len(gts), np.inf)
    n_p = vocab.paths.size
    for start in range(0, n_p, chunk):
        block = vocab.compose_block(np.arange(start, min(start + chunk, n_p)))  # (c, N_v, T, 2)
        flat = block.reshape(-1, block.shape[-2], 2)
        for h in range(len(gts)):
            ade = np.linalg.norm(flat - gts[h], axis=-1).mean(-1)
            best[h] = min(best[h], ade.min())
    return {
        "mean": float(best.mean()),
        "p90": float(np.percentile(best, 90)),
        "per_trajectory": best,
    }


def _b64(a: np.ndarray, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode("ascii")


def _unb64(s: str, dtype, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype=dtype).reshape(shape).copy()


def vocab_to_json(vocab: TrajectoryVocabulary) -> str:
    cfg = vocab.cfg
    n_p, n_v = vocab.shape
    doc = {
        "version": VOCAB_VERSION,
        "N_p": n_p,
        "N_v": n_v,
        "ds": cfg.ds,
        "s_max": cfg.s_max,
        "dt": cfg.dt,
        "T": cfg.horizon_T,
        "seed": vocab.paths.seed,
        "paths": _b64(vocab.paths.points, "<f8"),
        "path_mask": _b64(vocab.paths.valid_mask, "u1"),
        "velocities": _b64(vocab.velocities.speeds, "<f8"),
    }
    return json.dumps(doc, sort_keys=True)


def vocab_from_json(text: str) -> TrajectoryVocabulary:
    doc = json.loads(text)
    if doc.get("version") != VOCAB_VERSION:
        raise ConfigError(f"vocabulary version {doc.get('version')!r} != {VOCAB_VERSION}")
    cfg = FactorizationConfig(doc["ds"], doc["s_max"], doc["dt"], doc["T"])
    n_p, n_v, S, T = doc["N_p"], doc["N_v"], cfg.S, cfg.horizon_T
    pts = _unb64(doc["paths"], "<f8", (n_p, S, 2))
    mask = _unb64(doc["path_mask"], "u1", (n_p, S)).astype(bool)
    vel = _unb64(doc["velocities"], "<f8", (n_v, T))
    return TrajectoryVocabulary(
        PathVocabulary(pts, mask, cfg, doc["seed"]), VelocityVocabulary(vel, cfg, doc["seed"])
    )


def save_vocab(vocab: TrajectoryVocabulary, path) -> None:
    Path(path).write_text(vocab_to_json(vocab))


def load_vocab(path) -> TrajectoryVocabulary:
    return vocab_from_json(Path(path).read_text())
