"""Coarse-to-fine planning over a factorized vocabulary."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, stable_sigmoid
from .model import (
    AnchorCache,
    ModelParams,
    coarse_scores,
    encode_scene,
    fuse_recondition,
    path_block,
    rbf_weights,
    velocity_block,
)
from .scene import Scene
from .teacher import METRICS
from .trajectory import Trajectory

PLAN_SCHEMA = "plan/v1"
EXHAUSTIVE_LIMIT = 65536


class PlanningError(ValueError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stages: tuple = ((128, 64), (20, 20))

    def __post_init__(self):
        st = tuple((int(a), int(b)) for a, b in self.stages)
        if not st:
            raise PlanningError("at least one stage is required")
        for (p0, v0), (p1, v1) in zip(st, st[1:]):
            if p1 > p0 or v1 > v0:
                raise PlanningError(f"stage sizes must be non-increasing: {st}")
        if min(min(s) for s in st) < 1:
            raise PlanningError("every K must be >= 1")
        object.__setattr__(self, "stages", st)

    def check(self, vocab) -> None:
        n_p, n_v = vocab.shape
        kp, kv = self.stages[0]
        if kp > n_p or kv > n_v:
            raise PlanningError(f"stage ({kp}, {kv}) exceeds vocabulary {n_p}x{n_v}")

    @property
    def fine_count(self) -> int:
        kp, kv = self.stages[-1]
        return kp * kv


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties to the lower index, returned ascending."""
    s = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= len(s):
        raise PlanningError(f"k={k} outside [1, {len(s)}]")
    order = np.lexsort((np.arange(len(s)), -s))
    return np.sort(order[:k])


def aggregate_scores(probs: np.ndarray, s_tau: np.ndarray, beta: float = 0.0) -> np.ndarray:
    """PDMS weighting of predicted sub-score probabilities, optionally times an imitation weight."""
    nc, dac, ttc, c, ep = (probs[..., METRICS.index(m)] for m in ("nc", "dac", "ttc", "comfort", "ep"))
    score = nc * dac * (5 * ttc + 2 * c + 5 * ep) / 12
    if beta:
        z = s_tau - s_tau.max()
        w = np.exp(z) / np.exp(z).sum()
        score = score * w ** beta
    return score


def select(final: np.ndarray) -> int:
    """First maximum; candidates are laid out i-major with ascending indices."""
    return int(np.argmax(final))


@dataclass
class PlanResult:
    trajectory: Trajectory
    best: tuple
    cand_i: np.ndarray
    cand_j: np.ndarray
    final_scores: np.ndarray
    sub_probs: np.ndarray  # (C, 6)
    s_tau: np.ndarray
    stages: list = field(default_factory=list)  # per stage: surviving indices and scores
    counters: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": PLAN_SCHEMA,
            "best": list(self.best),
            "waypoints": self.trajectory.waypoints.tolist(),
            "dt": self.trajectory.dt,
            "cand_i": self.cand_i.tolist(),
            "cand_j": self.cand_j.tolist(),
            "final_scores": self.final_scores.tolist(),
            "sub_probs": {m: self.sub_probs[:, k].tolist() for k, m in enumerate(METRICS)},
            "s_tau": self.s_tau.tolist(),
            "stages": self.stages,
            "counters": self.counters,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class CoarseState:
    """Contextual anchor embeddings and coarse scores of one scene."""

    tokens: object
    h_p: Tensor  # (1, N_p, d)
    h_v: Tensor  # (1, N_v, d)
    s_p: np.ndarray
    s_v: np.ndarray


def coarse_pass(scene: Scene, vocab, params: ModelParams, cache: AnchorCache | None = None, P=None) -> CoarseState:
    P = P or params.tensors(requires_grad=False)
    cfg = params.cfg
    cache = cache or AnchorCache.build(vocab, params)
    tokens = encode_scene(scene, params, P)
    feats = tokens.features.reshape(1, *tokens.features.shape)
    mask = tokens.mask[None]
    E = tokens.ego.reshape(1, 1, cfg.d)
    W = None
    if cfg.path_interaction == "deformable":
        W = rbf_weights(vocab.paths.points, vocab.paths.valid_mask, tokens.positions, tokens.mask, cfg)[None]
    h_p = path_block(Tensor(cache.path[None]) + E, W, feats, mask, P, cfg)
    h_v = velocity_block(Tensor(cache.velocity[None]) + E, feats, mask, P, cfg)
    s_p, s_v = coarse_scores(h_p, h_v, P)
    return CoarseState(tokens, h_p, h_v, s_p.data[0].copy(), s_v.data[0].copy())


def fine_pass(state: CoarseState, vocab, params: ModelParams, ci: np.ndarray, cj: np.ndarray, P=None):
    """Compose and score candidate pairs; returns (waypoints, s_tau, probs, op count)."""
    P = P or params.tensors(requires_grad=False)
    tok = state.tokens
    wps = vocab.compose_pairs(ci, cj)
    W = rbf_weights(wps, np.ones(wps.shape[:2], dtype=bool), tok.positions, tok.mask, params.cfg)
    feats = tok.features.reshape(1, *tok.features.shape)
    _, s_tau, logits = fuse_recondition(state.h_p[0][ci][None], state.h_v[0][cj][None], W[None], feats, P)
    probs = stable_sigmoid(logits.data[0])
    C, T = wps.shape[:2]
    M, d, h = len(tok), params.cfg.d, params.cfg.hidden
    ops = C * (T * M + M * d + d * d + 2 * d * h + d * (1 + len(METRICS)))
    return wps, s_tau.data[0].copy(), probs, ops


def _result(wps, ci, cj, s_tau, probs, beta, stages, counters, dt) -> PlanResult:
    final = aggregate_scores(probs, s_tau, beta)
    b = select(final)
    return PlanResult(Trajectory(wps[b], dt), (int(ci[b]), int(cj[b])), ci, cj, final, probs, s_tau, stages,
                      counters)


def plan(scene: Scene, vocab, params: ModelParams, stage_cfg: StageConfig | None = None, beta: float = 0.0,
         cache: AnchorCache | None = None) -> PlanResult:
    """Staged top-K pruning, then fine scoring of the surviving compositions.

    Later stages re-rank the same coarse scores restricted to the survivors.
    """
    stage_cfg = stage_cfg or StageConfig()
    stage_cfg.check(vocab)
    P = params.tensors(requires_grad=False)
    st = coarse_pass(scene, vocab, params, cache, P)
    surv_p = np.arange(vocab.shape[0])
    surv_v = np.arange(vocab.shape[1])
    snaps = []
    for kp, kv in stage_cfg.stages:
        surv_p = surv_p[top_k(st.s_p[surv_p], kp)]
        surv_v = surv_v[top_k(st.s_v[surv_v], kv)]
        snaps.append({"K_p": kp, "K_v": kv, "paths": surv_p.tolist(), "velocities": surv_v.tolist(),
                      "path_scores": st.s_p[surv_p].tolist(), "velocity_scores": st.s_v[surv_v].tolist()})
    ii, jj = np.meshgrid(surv_p, surv_v, indexing="ij")
    ci, cj = ii.reshape(-1), jj.reshape(-1)
    wps, s_tau, probs, ops = fine_pass(st, vocab, params, ci, cj, P)
    counters = {"coarse_paths": int(vocab.shape[0]), "coarse_velocities": int(vocab.shape[1]),
                "fine_candidates": int(len(ci)), "fine_ops": int(ops)}
    return _result(wps, ci, cj, s_tau, probs, beta, snaps, counters, vocab.cfg.dt)


def plan_exhaustive(scene: Scene, vocab, params: ModelParams, beta: float = 0.0,
                    cache: AnchorCache | None = None) -> PlanResult:
    """Fine-score every (i, j) entry; the reference for pruning checks."""
    if vocab.size > EXHAUSTIVE_LIMIT:
        raise PlanningError(f"vocabulary of {vocab.size} entries exceeds the exhaustive limit {EXHAUSTIVE_LIMIT}")
    P = params.tensors(requires_grad=False)
    st = coarse_pass(scene, vocab, params, cache, P)
    n_p, n_v = vocab.shape
    ci = np.repeat(np.arange(n_p), n_v)
    cj = np.tile(np.arange(n_v), n_p)
    wps, s_tau, probs, ops = fine_pass(st, vocab, params, ci, cj, P)
    snaps = [{"K_p": n_p, "K_v": n_v, "paths": list(range(n_p)), "velocities": list(range(n_v)),
              "path_scores": st.s_p.tolist(), "velocity_scores": st.s_v.tolist()}]
    counters = {"coarse_paths": n_p, "coarse_velocities": n_v, "fine_candidates": int(len(ci)), "fine_ops": int(ops)}
    return _result(wps, ci, cj, s_tau, probs, beta, snaps, counters, vocab.cfg.dt)


def nearest_entry(vocab, expert_waypoints, chunk: int = 64) -> tuple[int, int]:
    """Vocabulary pair closest to the expert by summed squared waypoint error."""
    best, arg = np.inf, (0, 0)
    n_p = vocab.shape[0]
    for start in range(0, n_p, chunk):
        block = vocab.compose_block(np.arange(start, min(start + chunk, n_p)))
        d = ((block - expert_waypoints) ** 2).sum((-1, -2))
        k = int(np.argmin(d))
        if d.flat[k] < best:
            best = float(d.flat[k])
            arg = (start + k // d.shape[1], k % d.shape[1])
    return arg


def coarse_recall(scenes, experts, vocab, params: ModelParams, stage_cfg: StageConfig | None = None) -> dict:
    """Fraction of scenes whose expert-nearest pair survives every pruning stage."""
    stage_cfg = stage_cfg or StageConfig()
    cache = AnchorCache.build(vocab, params)
    hits = []
    for scene, exp in zip(scenes, experts):
        st = coarse_pass(scene, vocab, params, cache)
        surv_p = np.arange(vocab.shape[0])
        surv_v = np.arange(vocab.shape[1])
        for kp, kv in stage_cfg.stages:
            surv_p = surv_p[top_k(st.s_p[surv_p], kp)]
            surv_v = surv_v[top_k(st.s_v[surv_v], kv)]
        i, j = nearest_entry(vocab, exp)
        hits.append(bool(i in surv_p and j in surv_v))
    return {"recall": float(np.mean(hits)) if hits else 0.0, "n": len(hits), "hits": hits}
