"""Shared experiment routines used by the CLI and the scripts/ runners."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .evaluate import evaluate, model_planner
from .model import ModelConfig
from .planner import StageConfig
from .train import CandidateConfig, LabelCache, TrainConfig, build_training_set, train
from .trajectory import FactorizationConfig
from .vocabulary import (
    KMeansConfig,
    TrajectoryVocabulary,
    build_path_vocab,
    build_velocity_vocab,
    coverage_error,
)
from .data import path_demos

DEFAULT_LADDER = ((16, 8), (32, 16), (64, 16), (128, 32), (256, 64))
DESK_STAGES = ((16, 8), (8, 4))
SCALING_COLUMNS = ("N_p", "N_v", "total_anchors", "coverage_min_ade", "mean_pdms", "fine_candidates", "wall_time")


def build_vocab(samples, n_p: int, n_v: int, fcfg: FactorizationConfig | None = None, seed: int = 0,
                max_iters: int = 100) -> TrajectoryVocabulary:
    fcfg = fcfg or FactorizationConfig()
    pv = build_path_vocab(path_demos(samples), n_p, fcfg, KMeansConfig(n_p, max_iters, seed))
    vv = build_velocity_vocab([s.expert_trajectory for s in samples], n_v, fcfg, KMeansConfig(n_v, max_iters, seed))
    return TrajectoryVocabulary(pv, vv)


@dataclass
class LadderPoint:
    n_p: int
    n_v: int
    coverage: float
    pdms: list  # one per training seed
    fine_candidates: int
    wall_time: float

    @property
    def mean_pdms(self) -> float:
        return float(np.mean(self.pdms))

    def row(self) -> list:
        return [self.n_p, self.n_v, self.n_p * self.n_v, self.coverage, self.mean_pdms, self.fine_candidates,
                self.wall_time]


def scaling_study(train_samples, test_samples, ladder=DEFAULT_LADDER, stages=DESK_STAGES,
                  mcfg: ModelConfig | None = None, tcfg: TrainConfig | None = None, seeds=(0,),
                  ccfg: CandidateConfig | None = None, vocab_seed: int = 0, log=None) -> list[LadderPoint]:
    """Train and evaluate identically at every vocabulary density."""
    mcfg = mcfg or ModelConfig()
    tcfg = tcfg or TrainConfig()
    stage_cfg = StageConfig(stages)
    heldout = [s.expert_trajectory for s in test_samples]
    points = []
    for n_p, n_v in ladder:
        t0 = time.perf_counter()
        vocab = build_vocab(train_samples, n_p, n_v, seed=vocab_seed)
        cov = coverage_error(vocab, heldout)["mean"]
        ts = build_training_set(train_samples, vocab, mcfg, ccfg, seed=vocab_seed, cache=LabelCache())
        scores = []
        for seed in seeds:
            params, _ = train(ts, vocab, mcfg, TrainConfig(**{**tcfg.__dict__, "seed": seed}))
            scores.append(evaluate(test_samples, model_planner(vocab, params, stage_cfg)).mean_pdms)
        pt = LadderPoint(n_p, n_v, float(cov), scores, stage_cfg.fine_count, time.perf_counter() - t0)
        if log:
            log(pt)
        points.append(pt)
    return points
