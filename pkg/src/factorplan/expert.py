"""Scripted corridor-following expert used to produce demonstrations.

The expert blends from its current pose back onto the centerline and picks,
among a fan of speed-target profiles, the fastest one that the rule teacher
accepts under a stricter 2 s time-to-collision horizon.  It reads the
script's future agent motion, which the learned planner never sees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .scene import EgoState, ScenarioScript, wrap_angle
from .teacher import MetricThresholds, raw_metrics
from .trajectory import FactorizationConfig, Trajectory

RATES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.5, 5.0, 8.0)
TARGET_FRACTIONS = (0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0)
COMFORT_LAT = 2.0
EXPERT_TTC = 2.0


@dataclass
class ExpertPlan:
    trajectory: Trajectory
    reference: np.ndarray  # ego-frame geometry reaching past s_max
    profile: tuple  # (target speed, rate)


def reference_geometry(script: ScenarioScript, ego: EgoState, length: float, step: float = 0.5) -> np.ndarray:
    """World-frame polyline from the ego position blending onto the centerline."""
    corridor = script.scene.corridor
    s0, lat0 = corridor.project(ego.position[None])
    s0, lat0 = float(s0[0]), float(lat0[0])
    _, tan = corridor.point_at(np.array(s0))
    psi = float(wrap_angle(ego.heading - math.atan2(tan[1], tan[0])))
    blend = max(12.0, 1.5 * ego.speed)
    sig = np.arange(0.0, length + step, step)
    u = np.clip(sig / blend, 0.0, 1.0)
    # cubic Hermite from (lat0, tan psi) to (0, 0)
    h00 = 2 * u**3 - 3 * u**2 + 1
    h10 = u**3 - 2 * u**2 + u
    lat = h00 * lat0 + h10 * blend * math.tan(psi)
    pos, tng = corridor.point_at(s0 + sig)
    nrm = np.stack([-tng[:, 1], tng[:, 0]], -1)
    return pos + lat[:, None] * nrm


def _polyline_at(poly: np.ndarray, s: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return np.stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])], -1)


def speed_profiles(v0: float, targets, rates, T: int, dt: float, sub: int = 20) -> np.ndarray:
    """Cumulative distance at each step for ramps from v0 toward target at a given rate."""
    tt = np.linspace(0.0, T * dt, T * sub + 1)
    out = []
    for vt in targets:
        for r in rates:
            v = np.where(vt >= v0, np.minimum(v0 + r * tt, vt), np.maximum(v0 - r * tt, vt))
            s = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(tt))])
            out.append(s[sub::sub])
    return np.array(out)


def _first_interval_speed(v, vt, r, dt):
    """Average speed over [0, dt] of a ramp from v toward vt at rate r."""
    gap = np.abs(vt - v)
    tc = np.minimum(gap / r, dt)
    sgn = np.sign(vt - v)
    return v + sgn * (r * tc * tc / 2 + gap * (dt - tc) * (gap > 0)) / dt


def realized_distances(v0: float, targets, rates, T: int, dt: float, sim_dt: float = 0.1,
                       gain: float = 1.5, bounds=(-6.0, 3.0)) -> np.ndarray:
    """Distances the tracked vehicle actually covers when replanning the same
    ramp every ``dt``: the speed loop only sees the first interval's average."""
    vt = np.repeat(np.asarray(targets, float), len(rates))
    r = np.tile(np.asarray(rates, float), len(targets))
    v = np.full(len(vt), float(v0))
    s = np.zeros(len(vt))
    per = int(round(dt / sim_dt))
    out = np.zeros((len(vt), T))
    a = np.zeros(len(vt))
    for k in range(T * per):
        if k % per == 0:
            a = np.clip(gain * (_first_interval_speed(v, vt, r, dt) - v), *bounds)
        s = s + v * sim_dt
        v = np.maximum(0.0, v + a * sim_dt)
        if (k + 1) % per == 0:
            out[:, (k + 1) // per - 1] = s
    return out


def curve_speed_cap(script: ScenarioScript, ego: EgoState, lookahead: float) -> float:
    corridor = script.scene.corridor
    s0 = float(corridor.project(ego.position[None])[0][0])
    s = np.arange(s0, s0 + lookahead, 1.0)
    pos, tan = corridor.point_at(s)
    h = np.unwrap(np.arctan2(tan[:, 1], tan[:, 0]))
    kappa = np.max(np.abs(np.diff(h))) if len(h) > 1 else 0.0
    return math.sqrt(COMFORT_LAT / kappa) if kappa > 1e-6 else math.inf


def expert_plan(script: ScenarioScript, t: float, ego: EgoState, cfg: FactorizationConfig | None = None,
                th: MetricThresholds | None = None) -> ExpertPlan:
    cfg = cfg or FactorizationConfig()
    th = th or MetricThresholds()
    T, dt = cfg.horizon_T, cfg.dt
    v0 = ego.speed
    reach = max(cfg.s_max + 10.0, script.speed_limit * T * dt + 10.0)
    ref_world = reference_geometry(script, ego, reach)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    rel = ref_world - ego.position
    ref = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], -1)

    v_cap = min(script.speed_limit, curve_speed_cap(script, ego, v0 * T * dt + 30.0))
    targets = sorted({round(f * v_cap, 9) for f in TARGET_FRACTIONS} | ({round(v0, 9)} if v0 <= v_cap else set()))
    dist = speed_profiles(v0, targets, RATES, T, dt)
    combos = [(vt, r) for vt in targets for r in RATES]
    cands = _polyline_at(ref, dist.reshape(-1)).reshape(len(dist), T, 2)
    real = realized_distances(v0, targets, RATES, T, dt)
    real_xy = _polyline_at(ref, real.reshape(-1)).reshape(len(real), T, 2)

    strict = replace(th, ttc_horizon=EXPERT_TTC)
    m = raw_metrics(cands, script, t, ego, dt, strict)
    mr = raw_metrics(real_xy, script, t, ego, dt, strict)
    nc, dac, ttc, comfort, prog, lk = m.T
    safe = (nc > 0) & (ttc > 0) & (dac > 0) & (mr[:, 0] > 0) & (mr[:, 2] > 0)
    rate = np.array([r for _, r in combos])
    if safe.any():
        # lexicographic: safety, comfort, progress, then the gentlest rate
        key = np.lexsort((rate, -np.round(prog, 6), -comfort, -safe.astype(float)))
    else:
        # nothing clears the look-ahead: stop as short as possible
        key = np.lexsort((rate, real[:, -1]))
    best = int(key[0])
    return ExpertPlan(Trajectory(cands[best], dt), ref, combos[best])


class ExpertPlanner:
    """Closed-loop adapter with the ``planner(script, t, state)`` interface."""

    def __init__(self, cfg: FactorizationConfig | None = None, th: MetricThresholds | None = None):
        self.cfg = cfg or FactorizationConfig()
        self.th = th or MetricThresholds()

    def __call__(self, script, t, state):
        ego = EgoState(state.x, state.y, state.heading, state.speed, state.length, state.width)
        plan = expert_plan(script, t, ego, self.cfg, self.th)
        return plan.trajectory, {"profile": plan.profile}
