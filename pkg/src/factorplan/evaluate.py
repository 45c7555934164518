"""Open-loop scoring of planners and closed-loop adapters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AnchorCache, ModelParams
from .planner import StageConfig, coarse_recall, plan
from .scene import EgoState, local_view
from .teacher import MetricThresholds, epdms_array, pdms_array, teach_arrays
from .trajectory import Trajectory


def constant_velocity_plan(speed: float, T: int, dt: float) -> np.ndarray:
    """Straight ahead at the current speed."""
    return np.stack([speed * dt * np.arange(1, T + 1), np.zeros(T)], -1)


def score_plan(sample, waypoints, th: MetricThresholds | None = None) -> np.ndarray:
    """Sub-scores of one plan; progress is relative to the better of plan and expert."""
    return teach_arrays(np.asarray(waypoints)[None], sample.script, sample.t0, sample.ego, sample.dt, th,
                        reference=sample.expert[None])[0]


@dataclass
class OpenLoopReport:
    pdms: np.ndarray
    epdms: np.ndarray
    subscores: np.ndarray
    choices: list

    @property
    def mean_pdms(self) -> float:
        return float(self.pdms.mean())

    @property
    def mean_epdms(self) -> float:
        return float(self.epdms.mean())

    def summary(self) -> dict:
        from .teacher import METRICS

        return {"n": int(len(self.pdms)), "mean_pdms": self.mean_pdms, "mean_epdms": self.mean_epdms,
                **{f"mean_{m}": float(self.subscores[:, k].mean()) for k, m in enumerate(METRICS)}}


def evaluate(samples, planner_fn, th: MetricThresholds | None = None) -> OpenLoopReport:
    """``planner_fn(sample) -> (waypoints (T, 2), choice)``."""
    subs, choices = [], []
    for s in samples:
        w, choice = planner_fn(s)
        subs.append(score_plan(s, w, th))
        choices.append(choice)
    a = np.array(subs)
    return OpenLoopReport(pdms_array(a), epdms_array(a), a, choices)


def model_planner(vocab, params: ModelParams, stage_cfg: StageConfig | None = None, beta: float = 0.0):
    cache = AnchorCache.build(vocab, params)

    def fn(sample):
        res = plan(local_view(sample.script, sample.t0, sample.ego), vocab, params, stage_cfg, beta, cache)
        return res.trajectory.waypoints, list(res.best)

    return fn


def cv_planner(T: int = 8, dt: float = 0.5):
    def fn(sample):
        return constant_velocity_plan(sample.ego.speed, T, dt), None

    return fn


def recall_on(samples, vocab, params, stage_cfg=None) -> dict:
    scenes = [local_view(s.script, s.t0, s.ego) for s in samples]
    return coarse_recall(scenes, [s.expert for s in samples], vocab, params, stage_cfg)


class ClosedLoopPlanner:
    """``planner(script, t, state)`` adapter around the learned planner."""

    def __init__(self, vocab, params: ModelParams, stage_cfg: StageConfig | None = None, beta: float = 0.0):
        self.vocab, self.params, self.stage_cfg, self.beta = vocab, params, stage_cfg, beta
        self.cache = AnchorCache.build(vocab, params)

    def __call__(self, script, t, state):
        ego = EgoState(state.x, state.y, state.heading, state.speed, state.length, state.width)
        res = plan(local_view(script, t, ego), self.vocab, self.params, self.stage_cfg, self.beta, self.cache)
        return res.trajectory, {"choice": res.best}
