"""Trajectory <-> (path, velocity profile) factorization.

All trajectories live in the ego frame with an implicit origin anchor at
(0, 0) that precedes the first waypoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class FactorizationConfig:
    ds: float = 1.0
    s_max: float = 50.0
    dt: float = 0.5
    horizon_T: int = 8

    def __post_init__(self):
        if not self.ds > 0 or not self.dt > 0:
            raise ValidationError("ds and dt must be positive")
        if self.horizon_T < 1:
            raise ValidationError("horizon_T must be >= 1")
        n = self.s_max / self.ds
        if round(n) < 1 or abs(n - round(n)) > 1e-9:
            raise ValidationError(f"s_max={self.s_max} is not a positive multiple of ds={self.ds}")

    @property
    def S(self) -> int:
        return int(round(self.s_max / self.ds))


@dataclass(frozen=True, eq=False)
class Trajectory:
    waypoints: np.ndarray  # (T, 2)
    dt: float

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(w) < 1:
            raise ValidationError("trajectory needs at least one waypoint")
        if not np.all(np.isfinite(w)):
            raise ValidationError("non-finite waypoint")
        if not self.dt > 0:
            raise ValidationError("dt must be positive")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    @property
    def T(self) -> int:
        return len(self.waypoints)


@dataclass(frozen=True, eq=False)
class GeometricPath:
    points: np.ndarray  # (S, 2)
    ds: float
    valid_mask: np.ndarray  # (S,) bool, a prefix of True

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        m = np.asarray(self.valid_mask, dtype=bool).reshape(-1)
        if len(p) < 1 or len(p) != len(m):
            raise ValidationError("path points and mask must be non-empty and aligned")
        if np.any(m[1:] & ~m[:-1]):
            raise ValidationError("valid points must form a prefix")
        p.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "valid_mask", m)

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(frozen=True, eq=False)
class VelocityProfile:
    speeds: np.ndarray  # (T,)
    dt: float

    def __post_init__(self):
        v = np.asarray(self.speeds, dtype=np.float64).reshape(-1)
        if len(v) < 1 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("speeds must be finite and non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "speeds", v)


def extract_velocity(traj: Trajectory) -> VelocityProfile:
    return VelocityProfile(step_speeds(traj.waypoints, traj.dt), traj.dt)


def step_speeds(waypoints: np.ndarray, dt: float) -> np.ndarray:
    """Average speed per interval, origin as the predecessor of index 1.

    Works on any leading batch shape ``(..., T, 2)``.
    """
    w = np.asarray(waypoints, dtype=np.float64)
    prev = np.concatenate([np.zeros_like(w[..., :1, :]), w[..., :-1, :]], axis=-2)
    return np.linalg.norm(w - prev, axis=-1) / dt


def _chord_walk(poly: np.ndarray, ds: float, count: int) -> np.ndarray:
    """Walk along ``poly`` emitting points exactly ``ds`` (Euclidean) apart.

    Each new point is where the polyline first leaves the circle of radius
    ``ds`` around the previous point.  Returns at most ``count`` points.
    """
    out = []
    c = poly[0]
    seg, u = 0, 0.0
    n_seg = len(poly) - 1
    r2 = ds * ds
    while len(out) < count and seg < n_seg:
        a, b = poly[seg], poly[seg + 1]
        e = b - a
        ee = e @ e
        if ee == 0.0:
            seg, u = seg + 1, 0.0
            continue
        f = a - c
        # |f + u e|^2 = r^2; we are inside the circle at u, so the exit is the larger root
        bq = f @ e
        cq = f @ f - r2
        disc = bq * bq - ee * cq
        root = (-bq + np.sqrt(max(disc, 0.0))) / ee
        if root <= 1.0 and root >= u:
            c = a + root * e
            out.append(c)
            u = root
        else:
            seg, u = seg + 1, 0.0
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def resample_path(traj_points, cfg: FactorizationConfig) -> GeometricPath:
    pts = np.asarray(traj_points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValidationError("non-finite waypoint")
    poly = np.vstack([np.zeros((1, 2)), pts])
    S = cfg.S
    walked = _chord_walk(poly, cfg.ds, S)
    n = len(walked)
    points = np.zeros((S, 2))
    points[:n] = walked
    if n < S:
        # masked tail sits on the end of the input polyline
        points[n:] = poly[-1]
    mask = np.arange(S) < n
    return GeometricPath(points, cfg.ds, mask)


def factorize(traj: Trajectory, cfg: FactorizationConfig) -> tuple[GeometricPath, VelocityProfile]:
    return resample_path(traj.waypoints, cfg), extract_velocity(traj)


def cumulative_distance(vel: VelocityProfile) -> np.ndarray:
    return np.cumsum(vel.speeds * vel.dt)


def interpolate_on_paths(points: np.ndarray, n_valid: np.ndarray, ds: float, s: np.ndarray):
    """Vectorized point-at-distance.

    ``points`` (..., S, 2), ``n_valid`` (...), ``s`` (..., n) broadcastable
    against the path batch.  Returns (positions (..., n, 2), clamped (..., n)).
    A partially covered path keeps its polyline end in the first masked slot;
    the stretch from the last valid point to that end is a final short segment.
    """
    points = np.asarray(points, dtype=np.float64)
    n_valid = np.asarray(n_valid)
    s = np.asarray(s, dtype=np.float64)
    S = points.shape[-2]
    ext = np.concatenate([np.zeros_like(points[..., :1, :]), points], axis=-2)
    n = n_valid[..., None]
    last = np.take_along_axis(ext, n[..., None], axis=-2)
    end = np.take_along_axis(ext, np.minimum(n + 1, S)[..., None], axis=-2)
    tail = np.where(n < S, np.linalg.norm(end - last, axis=-1), 0.0)
    base = n * ds
    limit = base + tail
    clamped = s > limit + 1e-12
    sc = np.minimum(s, limit)
    u = np.minimum(sc, base) / ds
    idx = np.minimum(np.floor(u).astype(np.int64), np.maximum(n - 1, 0))
    frac = u - idx
    lo = np.take_along_axis(ext, idx[..., None], axis=-2)
    hi = np.take_along_axis(ext, np.minimum(idx + 1, S)[..., None], axis=-2)
    pos = lo + frac[..., None] * (hi - lo)
    over = sc - base
    in_tail = over > 0
    if np.any(in_tail):
        g = np.where(in_tail, over / np.where(tail > 0, tail, 1.0), 0.0)
        pos = np.where(in_tail[..., None], last + g[..., None] * (end - last), pos)
    return pos, clamped


def point_at_distance(path: GeometricPath, s: float) -> tuple[np.ndarray, bool]:
    if s < 0:
        raise ValidationError("distance must be non-negative")
    pos, clamped = interpolate_on_paths(path.points, np.array(path.n_valid), path.ds, np.array([s]))
    return pos[0], bool(clamped[0])


def compose(path: GeometricPath, vel: VelocityProfile) -> Trajectory:
    s = cumulative_distance(vel)
    pos, _ = interpolate_on_paths(path.points, np.array(path.n_valid), path.ds, s)
    return Trajectory(pos, vel.dt)


def compose_arrays(points: np.ndarray, n_valid: np.ndarray, ds: float, speeds: np.ndarray, dt: float) -> np.ndarray:
    """Compose every path with its paired velocity profile (leading dims broadcast)."""
    s = np.cumsum(np.asarray(speeds, dtype=np.float64) * dt, axis=-1)
    pos, _ = interpolate_on_paths(points, n_valid, ds, s)
    return pos


def headings_from_waypoints(waypoints: np.ndarray, initial: float = 0.0, min_step: float = 0.05) -> np.ndarray:
    """Finite-difference heading per waypoint; short steps keep the previous heading."""
    w = np.asarray(waypoints, dtype=np.float64)
    prev = np.concatenate([np.zeros_like(w[..., :1, :]), w[..., :-1, :]], axis=-2)
    d = w - prev
    raw = np.arctan2(d[..., 1], d[..., 0])
    moving = np.hypot(d[..., 0], d[..., 1]) >= min_step
    out = np.empty(raw.shape)
    last = np.full(raw.shape[:-1], float(initial))
    for t in range(raw.shape[-1]):
        last = np.where(moving[..., t], raw[..., t], last)
        out[..., t] = last
    return out
