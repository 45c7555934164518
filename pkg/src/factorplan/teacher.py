"""Rule-based teacher: per-candidate metric sub-scores and PDMS / EPDMS.

DDC, TL and EC are not computed: the synthetic worlds carry no driving
direction, traffic lights or extended-comfort semantics, so those slots are
fixed at 1.0.
"""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .scene import EgoState, ScenarioScript, agents_state_array, ego_to_world, wrap_angle
from .trajectory import Trajectory, headings_from_waypoints, step_speeds

METRICS = ("nc", "dac", "ttc", "comfort", "ep", "lk")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class MetricThresholds:
    ttc_horizon: float = 1.0
    max_abs_accel: float = 3.0
    max_abs_jerk: float = 5.0
    max_lat_accel: float = 4.0
    lk_margin: float = 0.5

    def __post_init__(self):
        if min(astuple(self)) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass(frozen=True)
class SubScores:
    nc: float = 1.0
    dac: float = 1.0
    ttc: float = 1.0
    comfort: float = 1.0
    ep: float = 1.0
    lk: float = 1.0
    ddc: float = 1.0
    tl: float = 1.0
    ec: float = 1.0

    def __post_init__(self):
        for name, v in zip(("nc", "dac", "ttc", "comfort", "ep", "lk", "ddc", "tl", "ec"), astuple(self)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, m) for m in METRICS])

    @classmethod
    def from_array(cls, row) -> "SubScores":
        return cls(**{m: float(v) for m, v in zip(METRICS, row)})


def pdms(s: SubScores) -> float:
    return s.nc * s.dac * (5 * s.ttc + 2 * s.comfort + 5 * s.ep) / 12


def epdms(s: SubScores) -> float:
    return s.nc * s.dac * s.ddc * s.tl * (5 * s.ep + 5 * s.ttc + 2 * s.lk + 2 * s.comfort + 2 * s.ec) / 16


def pdms_array(a: np.ndarray) -> np.ndarray:
    """PDMS over the trailing METRICS axis."""
    nc, dac, ttc, c, ep = (a[..., i] for i in range(5))
    return nc * dac * (5 * ttc + 2 * c + 5 * ep) / 12


def epdms_array(a: np.ndarray) -> np.ndarray:
    nc, dac, ttc, c, ep, lk = (a[..., i] for i in range(6))
    return nc * dac * (5 * ep + 5 * ttc + 2 * lk + 2 * c + 2) / 16


# -- geometry --------------------------------------------------------------

def rect_overlap(ca, ha, la, wa, cb, hb, lb, wb):
    """Broadcasting separating-axis test for oriented rectangles.

    ``c*`` (..., 2) centers, ``h*`` headings, ``l*``/``w*`` full length/width.
    True iff no separating axis exists (touching counts as overlap).
    """
    ca, cb = np.asarray(ca, float), np.asarray(cb, float)
    d = cb - ca
    axa = np.stack([np.cos(ha), np.sin(ha)], -1)
    aya = np.stack([-np.sin(ha), np.cos(ha)], -1)
    axb = np.stack([np.cos(hb), np.sin(hb)], -1)
    ayb = np.stack([-np.sin(hb), np.cos(hb)], -1)
    la2, wa2, lb2, wb2 = 0.5 * np.asarray(la), 0.5 * np.asarray(wa), 0.5 * np.asarray(lb), 0.5 * np.asarray(wb)
    dot = lambda u, v: (u * v).sum(-1)  # noqa: E731
    overlap = True
    for n in (axa, aya, axb, ayb):
        ra = la2 * np.abs(dot(axa, n)) + wa2 * np.abs(dot(aya, n))
        rb = lb2 * np.abs(dot(axb, n)) + wb2 * np.abs(dot(ayb, n))
        overlap = overlap & (np.abs(dot(d, n)) <= ra + rb)
    return overlap


def oriented_rect_overlap(a, b) -> bool:
    """``a`` and ``b`` are (x, y, heading, length, width)."""
    xa, ya, ha, la, wa = a
    xb, yb, hb, lb, wb = b
    if min(la, wa, lb, wb) <= 0:
        raise ValueError("extents must be positive")
    return bool(rect_overlap((xa, ya), ha, la, wa, (xb, yb), hb, lb, wb))


def rect_corners(center, heading, length, width):
    """(..., 4, 2) corners of oriented rectangles."""
    c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
    lx = np.array([0.5, 0.5, -0.5, -0.5]) * length
    ly = np.array([0.5, -0.5, -0.5, 0.5]) * width
    x = center[..., None, 0] + c * lx - s * ly
    y = center[..., None, 1] + s * lx + c * ly
    return np.stack([x, y], -1)


# -- metrics ---------------------------------------------------------------

def comfort_violations(waypoints, ego_speed: float, dt: float, th: MetricThresholds) -> dict:
    """Per-step comfort flags (True = violated) for waypoints (..., T, 2) in the ego frame.

    Speeds are interval averages; the current speed anchors the first
    acceleration half an interval earlier.  Lateral acceleration is speed times
    the yaw rate of the finite-difference heading.
    """
    w = np.asarray(waypoints, dtype=np.float64)
    v = step_speeds(w, dt)
    v_full = np.concatenate([np.full(v.shape[:-1] + (1,), float(ego_speed)), v], axis=-1)
    gaps = np.full(v.shape[-1], dt)
    gaps[0] = 0.5 * dt
    accel = np.diff(v_full, axis=-1) / gaps
    jerk = np.diff(accel, axis=-1) / dt
    h = headings_from_waypoints(w)
    h_full = np.concatenate([np.zeros(h.shape[:-1] + (1,)), h], axis=-1)
    yaw_rate = wrap_angle(np.diff(h_full, axis=-1)) / gaps
    v_mid = 0.5 * (v_full[..., 1:] + v_full[..., :-1])
    v_mid[..., 0] = v_full[..., 1]
    lat = v_mid * yaw_rate
    return {
        "accel": np.abs(accel) > th.max_abs_accel,
        "jerk": np.abs(jerk) > th.max_abs_jerk,
        "lat_accel": np.abs(lat) > th.max_lat_accel,
    }


def raw_metrics(waypoints, script: ScenarioScript, t0: float, ego: EgoState | None = None,
                dt: float = 0.5, th: MetricThresholds | None = None) -> np.ndarray:
    """(C, 6) rows of nc, dac, ttc, comfort, progress [m], lk.

    ``waypoints`` (C, T, 2) are in the frame of ``ego`` at time ``t0``.
    """
    th = th or MetricThresholds()
    ego = ego or script.scene.ego
    w = np.asarray(waypoints, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    C, T, _ = w.shape
    n_ttc = int(round(th.ttc_horizon / dt))
    if t0 + (T + n_ttc) * dt > script.duration + 1e-9:
        raise EvaluationError(
            f"horizon t0={t0}+{(T + n_ttc) * dt}s exceeds script duration {script.duration}s")
    corridor = script.scene.corridor

    pos = ego_to_world(w, ego)  # (C, T, 2)
    head = headings_from_waypoints(w) + ego.heading  # (C, T)
    prev = np.concatenate([np.broadcast_to(ego.position, (C, 1, 2)), pos[:, :-1]], axis=1)
    vel = (pos - prev) / dt

    agents = script.scene.agents
    if agents:
        times = t0 + dt * np.arange(1, T + n_ttc + 1)
        ag = np.stack([agents_state_array(agents, t) for t in times])  # (T+n, A, 6)

        def collide(p, h, k0):
            # p (C, T, 2) ego centers at trajectory step k0 + index, agents aligned by time
            a = ag[k0:k0 + p.shape[1]]
            hit = rect_overlap(p[:, :, None], h[:, :, None], ego.length, ego.width,
                               a[None, :, :, :2], a[None, :, :, 2], a[None, :, :, 4], a[None, :, :, 5])
            return hit.any(axis=(1, 2))

        nc = ~collide(pos, head, 0)
        ttc = nc.copy()
        for j in range(1, n_ttc + 1):
            proj = pos + vel * (j * dt)
            # the projection from step k lands at time index k + j
            a = ag[j:j + T]
            hit = rect_overlap(proj[:, :, None], head[:, :, None], ego.length, ego.width,
                               a[None, :, :, :2], a[None, :, :, 2], a[None, :, :, 4], a[None, :, :, 5])
            ttc &= ~hit.any(axis=(1, 2))
    else:
        nc = np.ones(C, dtype=bool)
        ttc = np.ones(C, dtype=bool)

    corners = rect_corners(pos, head, ego.length, ego.width)  # (C, T, 4, 2)
    _, lat_c = corridor.project(corners)
    dac = np.all(np.abs(lat_c) <= corridor.half_width, axis=(1, 2))
    s_all, lat = corridor.project(pos)
    lk = np.all(np.abs(lat) <= corridor.half_width - th.lk_margin, axis=1)

    flags = comfort_violations(w, ego.speed, dt, th)
    comfort = ~(flags["accel"].any(-1) | flags["jerk"].any(-1) | flags["lat_accel"].any(-1))

    s_ego, _ = corridor.project(ego.position[None])
    progress = np.maximum(s_all[:, -1] - s_ego[0], 0.0)
    return np.stack([nc, dac, ttc, comfort, progress, lk], axis=1).astype(np.float64)


def normalize_progress(raw: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """Replace the progress column by EP relative to the best nc*dac-passing row.

    ``reference`` rows take part in choosing the best progress but are not returned.
    """
    pool = raw if reference is None else np.vstack([raw, reference])
    safe = (pool[:, 0] > 0) & (pool[:, 1] > 0)
    out = raw.copy()
    best = pool[safe, 4].max() if safe.any() else 0.0
    if best > 0:
        out[:, 4] = np.clip(raw[:, 4] / best, 0.0, 1.0)
    elif safe.any():
        # every safe candidate stands still: nobody could make progress
        out[:, 4] = np.where((raw[:, 0] > 0) & (raw[:, 1] > 0), 1.0, 0.0)
    else:
        out[:, 4] = 0.0
    return out


def teach_arrays(waypoints, script, t0, ego=None, dt=0.5, th=None, reference=None) -> np.ndarray:
    """(C, 6) sub-scores with batch-relative EP.  ``reference`` are extra waypoints sets
    (e.g. the expert) competing for the EP reference."""
    raw = raw_metrics(waypoints, script, t0, ego, dt, th)
    ref = None if reference is None else raw_metrics(reference, script, t0, ego, dt, th)
    return normalize_progress(raw, ref)


def score_candidate(traj: Trajectory, script: ScenarioScript, t0: float, th: MetricThresholds | None = None,
                    ego: EgoState | None = None) -> SubScores:
    """Single-candidate scores; EP is relative to the candidate itself."""
    return teach_batch([traj], script, t0, th, ego)[0]


def teach_batch(candidates, script: ScenarioScript, t0: float, th: MetricThresholds | None = None,
                ego: EgoState | None = None, reference=None) -> list[SubScores]:
    if len(candidates) == 0:
        raise ValueError("empty candidate batch")
    dts = {c.dt for c in candidates}
    if len(dts) != 1:
        raise ValueError("candidates must share dt")
    w = np.stack([c.waypoints for c in candidates])
    ref = None if reference is None else np.stack([r.waypoints for r in reference])
    arr = teach_arrays(w, script, t0, ego, dts.pop(), th, ref)
    return [SubScores.from_array(r) for r in arr]
