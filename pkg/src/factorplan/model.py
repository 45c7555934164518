"""Learnable scorer over factorized anchors.

Shapes: B scenes, M scene tokens (plus an optional sink token), N_p / N_v
anchors, C composed fine candidates, d feature width.  Everything downstream
of the scene geometry runs on :class:`~factorplan.autograd.Tensor` so a single
``backward`` yields every parameter gradient.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, bce_with_logits, concat
from .scene import Scene
from .teacher import METRICS

CHECKPOINT_SCHEMA = "checkpoint/v1"
TOKEN_FEATURES = 9
POS_SCALE = 20.0
SPEED_SCALE = 10.0
ACCEL_SCALE = 3.0
LOG_COLUMNS = ("step", "l_path", "l_vel", "l_traj", "l_metric", "total")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    heads: int = 2
    hidden: int = 64
    sigma: float = 3.0
    map_spacing: float = 2.0
    path_interaction: str = "deformable"  # or "attention"
    # a learnable token every waypoint can fall back on when no scene token is close
    sink: bool = True
    sink_radius: float = 4.0
    lambda_p: float = 1.0
    lambda_v: float = 1.0
    lambda_tau: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.path_interaction not in ("deformable", "attention"):
            raise ValueError(f"unknown path interaction {self.path_interaction!r}")
        if min(self.sigma, self.lambda_p, self.lambda_v, self.lambda_tau) < 0 or self.alpha < 0:
            raise ValueError("sigma, lambdas and alpha must be non-negative")


# -- parameters ------------------------------------------------------------

def _mlp_shapes(prefix, n_in, hidden, n_out):
    return {f"{prefix}.w1": (n_in, hidden), f"{prefix}.b1": (hidden,),
            f"{prefix}.w2": (hidden, n_out), f"{prefix}.b2": (n_out,)}


def _attn_shapes(prefix, d):
    return {f"{prefix}.{k}": (d, d) for k in ("wq", "wk", "wv", "wo")}


def param_shapes(cfg: ModelConfig, S: int, T: int) -> dict:
    d, h = cfg.d, cfg.hidden
    shapes = {}
    shapes.update(_mlp_shapes("tok", TOKEN_FEATURES, h, d))
    shapes.update(_mlp_shapes("ego", 1, h, d))
    shapes.update(_mlp_shapes("ep", 3 * S, h, d))
    shapes.update(_mlp_shapes("ev", T, h, d))
    if cfg.path_interaction == "deformable":
        shapes.update({"pdef.w": (d, d), "pdef.b": (d,)})
    else:
        shapes.update(_attn_shapes("patt", d))
    shapes.update(_mlp_shapes("pffn", d, h, d))
    shapes.update(_attn_shapes("vatt", d))
    shapes.update(_mlp_shapes("vffn", d, h, d))
    shapes.update({"tdef.w": (d, d), "tdef.b": (d,)})
    shapes.update(_mlp_shapes("tffn", d, h, d))
    if cfg.sink:
        shapes["sink"] = (d,)
    shapes.update({"head_p.w": (d, 1), "head_p.b": (1,), "head_v.w": (d, 1), "head_v.b": (1,),
                   "head_tau.w": (d, 1), "head_tau.b": (1,),
                   "head_m.w": (d, len(METRICS)), "head_m.b": (len(METRICS),)})
    return shapes


@dataclass
class ModelParams:
    cfg: ModelConfig
    S: int
    T: int
    arrays: dict
    seed: int = 0
    step: int = 0

    def tensors(self, requires_grad: bool = True) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, self.S, self.T, {k: v.copy() for k, v in self.arrays.items()},
                           self.seed, self.step)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def num_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(cfg: ModelConfig, S: int, T: int, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg, S, T).items():
        if len(shape) == 2:
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif name == "sink":
            arrays[name] = rng.normal(0.0, 0.1, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(cfg, S, T, arrays, seed)


# -- scene tokens ----------------------------------------------------------

@dataclass
class TokenInputs:
    """Raw (pre-perceptron) token inputs of one ego-frame scene."""

    positions: np.ndarray  # (M, 2)
    raw: np.ndarray  # (M, TOKEN_FEATURES)
    ego_raw: np.ndarray  # (1,)
    n_agents: int


@dataclass
class SceneTokens:
    positions: np.ndarray  # (M', 2); sink (if any) last, placed at +inf
    features: Tensor  # (M', d)
    ego: Tensor  # (d,)
    mask: np.ndarray  # (M',) bool

    def __len__(self):
        return len(self.positions)


def tokenize(scene: Scene, spacing: float = 2.0) -> TokenInputs:
    """One token per agent, one per ``spacing`` metres of centerline, in the scene's frame."""
    rows, pos = [], []
    for a in scene.agents:
        rows.append([a.x / POS_SCALE, a.y / POS_SCALE, np.cos(a.heading), np.sin(a.heading),
                     a.speed / SPEED_SCALE, a.length / 5.0, a.width / 5.0, a.accel / ACCEL_SCALE, 1.0])
        pos.append([a.x, a.y])
    cor = scene.corridor
    s = np.arange(0.0, cor.length + 1e-9, spacing)
    p, t = cor.point_at(s)
    # centerline tokens carry the posted limit in the speed slot
    for (x, y), (tx, ty) in zip(p, t):
        rows.append([x / POS_SCALE, y / POS_SCALE, tx, ty, cor.speed_limit / SPEED_SCALE, 0.0, 0.0, 0.0, 0.0])
        pos.append([x, y])
    return TokenInputs(np.array(pos, dtype=np.float64).reshape(-1, 2), np.array(rows, dtype=np.float64),
                       np.array([scene.ego.speed / SPEED_SCALE]), len(scene.agents))


def mlp(x: Tensor, P: dict, prefix: str) -> Tensor:
    h = (x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"]).silu()
    return h @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def encode_tokens(raw: np.ndarray, mask: np.ndarray, ego_raw: np.ndarray, P: dict, cfg: ModelConfig):
    """Batched scene encoder.  ``raw`` (B, M, F) -> features (B, M', d), ego (B, d), mask (B, M')."""
    feats = mlp(Tensor(raw), P, "tok")
    if cfg.sink:
        B = raw.shape[0]
        sink = P["sink"].reshape(1, 1, cfg.d) * np.ones((B, 1, 1))
        feats = concat([feats, sink], axis=1)
        mask = np.concatenate([mask, np.ones((B, 1), dtype=bool)], axis=1)
    ego = mlp(Tensor(ego_raw), P, "ego")
    return feats, ego, mask


def encode_scene(scene: Scene, params: ModelParams, P: dict | None = None) -> SceneTokens:
    """Scene (already in the ego frame) to tokens."""
    P = P or params.tensors(requires_grad=False)
    ti = tokenize(scene, params.cfg.map_spacing)
    feats, ego, mask = encode_tokens(ti.raw[None], np.ones((1, len(ti.raw)), dtype=bool), ti.ego_raw[None],
                                     P, params.cfg)
    pos = ti.positions
    if params.cfg.sink:
        pos = np.vstack([pos, [np.inf, np.inf]])
    return SceneTokens(pos, feats[0], ego[0], mask[0])


# -- anchors ---------------------------------------------------------------

def path_inputs(points: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(N, S, 2) points + (N, S) mask -> (N, 3S) encoder inputs."""
    m = valid.astype(np.float64)
    flat = (points / POS_SCALE * m[..., None]).reshape(len(points), -1)
    return np.concatenate([flat, m], axis=1)


def velocity_inputs(speeds: np.ndarray) -> np.ndarray:
    return np.asarray(speeds, dtype=np.float64) / SPEED_SCALE


def embed_anchors(vocab, params: ModelParams, P: dict | None = None):
    """Static path and velocity embeddings, (N_p, d) and (N_v, d)."""
    P = P or params.tensors(requires_grad=False)
    ep = mlp(Tensor(path_inputs(vocab.paths.points, vocab.paths.valid_mask)), P, "ep")
    ev = mlp(Tensor(velocity_inputs(vocab.velocities.speeds)), P, "ev")
    return ep, ev


@dataclass
class AnchorCache:
    """Embeddings computed once per (params, vocabulary) pair."""

    path: np.ndarray
    velocity: np.ndarray

    @classmethod
    def build(cls, vocab, params: ModelParams) -> "AnchorCache":
        ep, ev = embed_anchors(vocab, params)
        return cls(ep.data.copy(), ev.data.copy())


# -- interaction -----------------------------------------------------------

def rbf_weights(points: np.ndarray, point_mask: np.ndarray, tok_pos: np.ndarray, tok_mask: np.ndarray,
                cfg: ModelConfig) -> np.ndarray:
    """Waypoint-averaged RBF attention of ``points`` (..., n, 2) over tokens (M, 2).

    Each valid waypoint spreads a softmax over the tokens of exp(-|w - pos|^2 / 2 sigma^2);
    the result is the masked mean over waypoints, shape (..., M') where the sink
    column (if enabled) is last.  Rows without a valid waypoint are zero.
    """
    tok_pos = np.asarray(tok_pos, dtype=np.float64)
    tok_mask = np.asarray(tok_mask, dtype=bool)
    real = np.isfinite(tok_pos[:, 0])
    diff = points[..., :, None, :] - np.where(real[:, None], tok_pos, 0.0)
    logit = -(diff * diff).sum(-1) / (2.0 * cfg.sigma ** 2)
    logit = np.where(tok_mask & real, logit, -np.inf)
    if cfg.sink and not real.all():
        # the sink behaves like a token sitting sink_radius away from every waypoint
        logit = np.where(~real & tok_mask, -cfg.sink_radius ** 2 / (2.0 * cfg.sigma ** 2), logit)
    logit = logit - logit.max(-1, keepdims=True)
    w = np.exp(logit)
    w /= w.sum(-1, keepdims=True)
    pm = point_mask.astype(np.float64)[..., None]
    n = pm.sum(-2)
    return (w * pm).sum(-2) / np.where(n > 0, n, 1.0)


def _deform(q: Tensor, W: np.ndarray, feats: Tensor, P: dict, prefix: str) -> Tensor:
    agg = Tensor(W) @ feats
    return q + agg @ P[f"{prefix}.w"] + P[f"{prefix}.b"]


def deformable_aggregate(anchors, embeddings: Tensor, tokens: SceneTokens, params: ModelParams,
                         P: dict | None = None, prefix: str = "pdef") -> Tensor:
    """Path embeddings plus projected scene features sampled along each anchor.

    ``anchors`` is a ``(points (N, S, 2), valid (N, S))`` pair.
    """
    P = P or params.tensors(requires_grad=False)
    pts, valid = anchors
    W = rbf_weights(pts, valid, tokens.positions, tokens.mask, params.cfg)
    return _deform(embeddings, W, tokens.features, P, prefix)


def _attend(q: Tensor, feats: Tensor, mask: np.ndarray, P: dict, prefix: str, heads: int) -> Tensor:
    """Batched multi-head attention with residual.  q (B, n, d), feats (B, M, d), mask (B, M)."""
    B, n, d = q.shape
    M = feats.shape[1]
    dh = d // heads
    Q = (q @ P[f"{prefix}.wq"]).reshape(B, n, heads, dh).transpose(0, 2, 1, 3)
    K = (feats @ P[f"{prefix}.wk"]).reshape(B, M, heads, dh).transpose(0, 2, 3, 1)
    V = (feats @ P[f"{prefix}.wv"]).reshape(B, M, heads, dh).transpose(0, 2, 1, 3)
    A = ((Q @ K) * (1.0 / np.sqrt(dh))).softmax(axis=-1, mask=mask[:, None, None, :])
    out = (A @ V).transpose(0, 2, 1, 3).reshape(B, n, d)
    return q + out @ P[f"{prefix}.wo"]


def _ffn(h: Tensor, P: dict, prefix: str) -> Tensor:
    return h + mlp(h, P, prefix)


def cross_attend(queries: Tensor, tokens: SceneTokens, params: ModelParams, P: dict | None = None,
                 prefix: str = "vatt", ffn: str = "vffn") -> Tensor:
    """Queries (n, d) attend to scene tokens, then a residual feed-forward."""
    P = P or params.tensors(requires_grad=False)
    q = queries.reshape(1, *queries.shape)
    h = _attend(q, tokens.features.reshape(1, *tokens.features.shape), tokens.mask[None], P, prefix,
                params.cfg.heads)
    return _ffn(h, P, ffn)[0]


def coarse_scores(h_p: Tensor, h_v: Tensor, P: dict):
    """Linear heads: one logit per anchor.  Works on (..., N, d)."""
    sp = (h_p @ P["head_p.w"] + P["head_p.b"])
    sv = (h_v @ P["head_v.w"] + P["head_v.b"])
    return sp.reshape(*sp.shape[:-1]), sv.reshape(*sv.shape[:-1])


def path_block(q: Tensor, W: np.ndarray | None, feats: Tensor, mask: np.ndarray, P: dict,
               cfg: ModelConfig) -> Tensor:
    if cfg.path_interaction == "deformable":
        h = _deform(q, W, feats, P, "pdef")
    else:
        h = _attend(q, feats, mask, P, "patt", cfg.heads)
    return _ffn(h, P, "pffn")


def velocity_block(q: Tensor, feats: Tensor, mask: np.ndarray, P: dict, cfg: ModelConfig) -> Tensor:
    return _ffn(_attend(q, feats, mask, P, "vatt", cfg.heads), P, "vffn")


def fuse_recondition(hp_sel: Tensor, hv_sel: Tensor, W_tau: np.ndarray, feats: Tensor, P: dict):
    """e_tau = hp + hv, re-conditioned along the composed waypoints.

    ``W_tau`` (B, C, M') are RBF weights of each candidate's waypoints.
    Returns (e_tau, s_tau (B, C), metric logits (B, C, 6)).
    """
    e = hp_sel + hv_sel
    h = _ffn(_deform(e, W_tau, feats, P, "tdef"), P, "tffn")
    s_tau = h @ P["head_tau.w"] + P["head_tau.b"]
    logits = h @ P["head_m.w"] + P["head_m.b"]
    return e, s_tau.reshape(*s_tau.shape[:-1]), logits


# -- batched forward for training -------------------------------------------

@dataclass
class Batch:
    """Model inputs for B scenes; every array is numpy."""

    tok_raw: np.ndarray  # (B, M, F)
    tok_mask: np.ndarray  # (B, M)
    ego_raw: np.ndarray  # (B, 1)
    W_path: np.ndarray | None  # (B, N_p, M') precomputed path RBF weights
    W_tau: np.ndarray  # (B, C, M')
    cand_i: np.ndarray  # (B, C) path index of each candidate
    cand_j: np.ndarray  # (B, C)


@dataclass
class Targets:
    d_path: np.ndarray  # (B, N_p)
    path_weight: np.ndarray  # (B,)  0 when the expert path is empty
    d_vel: np.ndarray  # (B, N_v)
    d_traj: np.ndarray  # (B, C)
    labels: np.ndarray  # (B, C, 6)


@dataclass
class Outputs:
    s_path: Tensor
    s_vel: Tensor
    s_tau: Tensor
    metric_logits: Tensor


def forward(P: dict, cfg: ModelConfig, batch: Batch, path_in: np.ndarray, vel_in: np.ndarray) -> Outputs:
    feats, ego, mask = encode_tokens(batch.tok_raw, batch.tok_mask, batch.ego_raw, P, cfg)
    ep = mlp(Tensor(path_in), P, "ep")
    ev = mlp(Tensor(vel_in), P, "ev")
    B = batch.tok_raw.shape[0]
    E = ego.reshape(B, 1, cfg.d)
    hp = path_block(ep + E, batch.W_path, feats, mask, P, cfg)
    hv = velocity_block(ev + E, feats, mask, P, cfg)
    sp, sv = coarse_scores(hp, hv, P)
    rows = np.arange(B)[:, None]
    _, s_tau, logits = fuse_recondition(hp[rows, batch.cand_i], hv[rows, batch.cand_j], batch.W_tau, feats, P)
    return Outputs(sp, sv, s_tau, logits)


# -- losses ----------------------------------------------------------------

@dataclass(frozen=True)
class SoftTargets:
    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("soft targets must be a probability vector")


def soft_target_array(d: np.ndarray, lam: float) -> np.ndarray:
    """softmax(-lam * d) along the last axis."""
    z = -lam * np.asarray(d, dtype=np.float64)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def soft_targets(distances, lam: float) -> SoftTargets:
    d = np.asarray(distances, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return SoftTargets(soft_target_array(d, lam))


@dataclass(frozen=True)
class LossBreakdown:
    l_path: float
    l_vel: float
    l_traj: float
    l_metric: float
    total: float
    alpha: float = 1.0

    def row(self, step: int) -> list:
        return [step, self.l_path, self.l_vel, self.l_traj, self.l_metric, self.total]


def _ce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-row cross-entropy of soft ``target`` against softmax(logits), (B,)."""
    return -(logits.log_softmax(axis=-1) * target).sum(axis=-1)


def loss_terms(out: Outputs, tg: Targets, cfg: ModelConfig):
    if out.s_path.shape != tg.d_path.shape or out.s_vel.shape != tg.d_vel.shape:
        raise ValueError("anchor score / distance shape mismatch")
    if tg.labels is None or out.metric_logits.shape != tg.labels.shape:
        raise ValueError("teacher labels missing or mis-shaped")
    if out.s_tau.shape != tg.d_traj.shape:
        raise ValueError("candidate score / distance shape mismatch")
    w = np.asarray(tg.path_weight, dtype=np.float64)
    lp = (_ce(out.s_path, soft_target_array(tg.d_path, cfg.lambda_p)) * w).sum() / max(w.sum(), 1.0)
    lv = _ce(out.s_vel, soft_target_array(tg.d_vel, cfg.lambda_v)).mean()
    lt = _ce(out.s_tau, soft_target_array(tg.d_traj, cfg.lambda_tau)).mean()
    lm = bce_with_logits(out.metric_logits, tg.labels).mean()
    total = lp + lv + lt + lm * cfg.alpha
    return total, (lp, lv, lt, lm)


def loss_total(out: Outputs, tg: Targets, cfg: ModelConfig):
    """Returns (total Tensor for backward, LossBreakdown of floats)."""
    total, (lp, lv, lt, lm) = loss_terms(out, tg, cfg)
    parts = [float(x.data) for x in (lp, lv, lt, lm)]
    bd = LossBreakdown(*parts, total=parts[0] + parts[1] + parts[2] + cfg.alpha * parts[3], alpha=cfg.alpha)
    return total, bd


# -- distances to the expert ------------------------------------------------

def path_distances(gt_points, gt_valid, anchor_points) -> np.ndarray:
    """Mean squared distance over the expert's valid path samples.  (N_p,)"""
    m = np.asarray(gt_valid, dtype=np.float64)
    if m.sum() == 0:
        return np.zeros(len(anchor_points))
    sq = ((anchor_points - gt_points) ** 2).sum(-1)
    return (sq * m).sum(-1) / m.sum()


def velocity_distances(gt_speeds, anchor_speeds) -> np.ndarray:
    return np.abs(anchor_speeds - gt_speeds).mean(-1)


def trajectory_distances(gt_waypoints, cand_waypoints) -> np.ndarray:
    return ((cand_waypoints - gt_waypoints) ** 2).sum(-1).sum(-1)


# -- checkpoint ------------------------------------------------------------

def save_checkpoint(params: ModelParams, directory, log_rows=None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    blocks, offset = [], 0
    names = sorted(params.arrays)
    for n in names:
        a = params.arrays[n]
        blocks.append({"name": n, "shape": list(a.shape), "offset": offset})
        offset += a.size
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "d": params.cfg.d,
        "seed": params.seed,
        "step": params.step,
        "S": params.S,
        "T": params.T,
        "config": asdict(params.cfg),
        "dtype": "<f8",
        "blocks": blocks,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    flat = np.concatenate([params.arrays[n].reshape(-1) for n in names]).astype("<f8")
    (out / "params.bin").write_bytes(flat.tobytes())
    if log_rows is not None:
        lines = [",".join(LOG_COLUMNS)]
        lines += [",".join([str(int(r[0]))] + [repr(float(x)) for x in r[1:]]) for r in log_rows]
        (out / "train_log.csv").write_text("\n".join(lines) + "\n")
    return out


def load_checkpoint(directory) -> ModelParams:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"checkpoint schema {manifest.get('schema')!r} != {CHECKPOINT_SCHEMA}")
    cfg = ModelConfig(**manifest["config"])
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f8")
    arrays = {}
    for b in manifest["blocks"]:
        n = int(np.prod(b["shape"])) if b["shape"] else 1
        arrays[b["name"]] = flat[b["offset"]:b["offset"] + n].reshape(b["shape"]).copy()
    expected = param_shapes(cfg, manifest["S"], manifest["T"])
    if {k: tuple(v.shape) for k, v in arrays.items()} != {k: tuple(v) for k, v in expected.items()}:
        raise ValueError("checkpoint blocks do not match the configured architecture")
    return ModelParams(cfg, manifest["S"], manifest["T"], arrays, manifest["seed"], manifest["step"])
