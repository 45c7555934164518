"""Synthetic vector driving worlds and a seeded scenario generator.

Per-kind parameter ranges (uniform draws from the seed):

================== ==========================================================
kind               parameters
================== ==========================================================
empty-road         ego speed 3-12 m/s, road curvature |k| <= 0.005
lead-vehicle-cruise lead 15-35 m ahead at 3-9 m/s, ego within -1/+2 m/s of it
lead-vehicle-brake lead 20-35 m ahead at 6-10 m/s, brakes at 1-4 s with
                   2-3.5 m/s^2 until stopped
crossing-agent     pedestrian 25-45 m ahead, starts 2-6 m outside the
                   corridor edge, walks across at 1-2 m/s
curved-road        arc of curvature 0.02-0.08 (either side) spanning 45-90 deg,
                   starting 5-25 m ahead; ego speed 4-10 m/s
blocked-lane       stopped vehicle 25-50 m ahead, lateral offset within 0.5 m
================== ==========================================================

Every script is placed at a random world pose so frame handling is always
exercised.  The corridor half-width is 3.5 m throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

KINDS = (
    "empty-road",
    "lead-vehicle-cruise",
    "lead-vehicle-brake",
    "crossing-agent",
    "curved-road",
    "blocked-lane",
)
SCENARIO_SCHEMA = "scenario/v1"
HALF_WIDTH = 3.5
DURATION = 16.0
EGO_START_S = 20.0
ROUTE_AHEAD = 220.0


class ScenarioError(ValueError):
    pass


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.5
    width: float = 2.0

    def __post_init__(self):
        if self.speed < 0 or self.length <= 0 or self.width <= 0:
            raise ScenarioError("invalid ego state")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Agent:
    id: int
    x: float
    y: float
    heading: float
    speed: float
    length: float = 4.5
    width: float = 2.0
    behavior: str = "constant-velocity"
    # (t_start, speed, accel) segments; speed clamps at zero
    schedule: tuple = ()
    # observed longitudinal acceleration, filled in by agent_at
    accel: float = 0.0

    def __post_init__(self):
        if self.speed < 0 or self.length <= 0 or self.width <= 0:
            raise ScenarioError("invalid agent")
        if self.behavior not in ("constant-velocity", "scripted-piecewise-speed"):
            raise ScenarioError(f"unknown behavior {self.behavior!r}")

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


class DrivableCorridor:
    """Centerline polyline plus constant half-width; ``speed_limit`` 0 means unposted."""

    def __init__(self, centerline, half_width: float = HALF_WIDTH, speed_limit: float = 0.0):
        c = np.asarray(centerline, dtype=np.float64).reshape(-1, 2)
        if len(c) < 2:
            raise ScenarioError("centerline needs at least two points")
        seg = np.linalg.norm(np.diff(c, axis=0), axis=1)
        if np.any(seg <= 0):
            raise ScenarioError("centerline arclength must be strictly increasing")
        if half_width <= 0:
            raise ScenarioError("half_width must be positive")
        if speed_limit < 0:
            raise ScenarioError("speed_limit must be non-negative")
        self.centerline = c
        self.half_width = float(half_width)
        self.speed_limit = float(speed_limit)
        self.arclength = np.concatenate([[0.0], np.cumsum(seg)])
        self._tree = None

    def __eq__(self, other):
        if not isinstance(other, DrivableCorridor):
            return NotImplemented
        return (self.half_width == other.half_width and self.speed_limit == other.speed_limit
                and np.array_equal(self.centerline, other.centerline))

    __hash__ = None

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def _kdtree(self):
        if self._tree is None:
            self._tree = cKDTree(self.centerline)
        return self._tree

    def project(self, points):
        """Arc coordinate and signed lateral offset (left positive) of points."""
        p = np.asarray(points, dtype=np.float64)
        shape = p.shape[:-1]
        p = p.reshape(-1, 2)
        c = self.centerline
        n = len(c)
        _, k = self._kdtree().query(p)
        best_d = np.full(len(p), np.inf)
        best_s = np.zeros(len(p))
        best_l = np.zeros(len(p))
        for off in (-1, 0):
            i0 = np.clip(k + off, 0, n - 2)
            a, b = c[i0], c[i0 + 1]
            e = b - a
            ee = (e * e).sum(1)
            u = ((p - a) * e).sum(1) / ee
            # extrapolate past the ends so out-of-range points keep a lateral sign
            u_c = np.where((i0 == 0) & (u < 0), u, np.where((i0 == n - 2) & (u > 1), u, np.clip(u, 0, 1)))
            q = a + u_c[:, None] * e
            d = np.linalg.norm(p - q, axis=1)
            better = d < best_d
            seglen = np.sqrt(ee)
            lat = (e[:, 0] * (p[:, 1] - a[:, 1]) - e[:, 1] * (p[:, 0] - a[:, 0])) / seglen
            best_d = np.where(better, d, best_d)
            best_s = np.where(better, self.arclength[i0] + u_c * seglen, best_s)
            best_l = np.where(better, lat, best_l)
        return best_s.reshape(shape), best_l.reshape(shape)

    def point_at(self, s):
        """Position and unit tangent at arc coordinate(s), clamped to the ends."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        i = np.clip(np.searchsorted(self.arclength, s, side="right") - 1, 0, len(self.centerline) - 2)
        a, b = self.centerline[i], self.centerline[i + 1]
        seglen = self.arclength[i + 1] - self.arclength[i]
        u = (s - self.arclength[i]) / seglen
        pos = a + u[..., None] * (b - a)
        tan = (b - a) / seglen[..., None]
        return pos, tan

    def max_curvature(self) -> float:
        c = self.centerline
        h = np.unwrap(np.arctan2(np.diff(c[:, 1]), np.diff(c[:, 0])))
        ds = np.diff(self.arclength)
        if len(h) < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(h)) / (0.5 * (ds[1:] + ds[:-1]))))

    def crop(self, s_lo: float, s_hi: float) -> "DrivableCorridor":
        s_lo = max(0.0, s_lo)
        s_hi = min(self.length, s_hi)
        inside = (self.arclength > s_lo) & (self.arclength < s_hi)
        pts_lo, _ = self.point_at(np.array(s_lo))
        pts_hi, _ = self.point_at(np.array(s_hi))
        pts = np.vstack([pts_lo[None], self.centerline[inside], pts_hi[None]])
        keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9])
        return DrivableCorridor(pts[keep], self.half_width, self.speed_limit)

    def transformed(self, rot: np.ndarray, shift: np.ndarray) -> "DrivableCorridor":
        return DrivableCorridor((self.centerline + shift) @ rot.T, self.half_width, self.speed_limit)


@dataclass(frozen=True)
class Scene:
    ego: EgoState
    agents: tuple
    corridor: DrivableCorridor
    timestamp: float = 0.0


@dataclass(frozen=True)
class ScenarioScript:
    kind: str
    seed: int
    duration: float
    scene: Scene
    speed_limit: float
    params: dict = field(default_factory=dict)

    @property
    def id(self) -> str:
        return f"{self.kind}-{self.seed}"


def _segment_distance(v0: float, a: float, tau: float) -> tuple[float, float]:
    """Distance and final speed after ``tau`` seconds, speed clamped at zero."""
    if a < 0:
        tau = min(tau, v0 / -a) if v0 > 0 else 0.0
    return v0 * tau + 0.5 * a * tau * tau, max(0.0, v0 + a * tau)


def agent_travel(agent: Agent, t: float) -> tuple[float, float, float]:
    """(distance along heading, speed, acceleration) at time t since script start."""
    if agent.behavior == "constant-velocity" or not agent.schedule:
        return agent.speed * t, agent.speed, 0.0
    dist, speed, acc = 0.0, agent.speed, 0.0
    sched = list(agent.schedule)
    for k, (t0, v0, a) in enumerate(sched):
        if t <= t0:
            break
        t1 = sched[k + 1][0] if k + 1 < len(sched) else math.inf
        d, speed = _segment_distance(v0, a, min(t, t1) - t0)
        dist += d
        # a stopped agent stays stopped
        acc = 0.0 if speed == 0.0 and a < 0 else a
    return dist, speed, acc


def agent_at(agent: Agent, t: float) -> Agent:
    d, v, acc = agent_travel(agent, t)
    c, s = math.cos(agent.heading), math.sin(agent.heading)
    return replace(agent, x=agent.x + d * c, y=agent.y + d * s, speed=v, behavior="constant-velocity", schedule=(),
                   accel=acc)


def agents_state_array(agents, t: float) -> np.ndarray:
    """(A, 6) array of x, y, heading, speed, length, width at time t."""
    rows = []
    for a in agents:
        m = agent_at(a, t)
        rows.append((m.x, m.y, m.heading, m.speed, m.length, m.width))
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


def scene_at(script: ScenarioScript, t: float) -> Scene:
    if not (0.0 <= t <= script.duration + 1e-9):
        raise ScenarioError(f"t={t} outside [0, {script.duration}]")
    sc = script.scene
    return Scene(sc.ego, tuple(agent_at(a, t) for a in sc.agents), sc.corridor, sc.timestamp + t)


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def transform_scene(scene: Scene, rot: np.ndarray, shift: np.ndarray, dtheta: float, ego=None) -> Scene:
    """Apply p -> rot @ (p + shift) and heading -> heading + dtheta."""

    def tp(x, y):
        q = rot @ (np.array([x, y]) + shift)
        return float(q[0]), float(q[1])

    e = scene.ego if ego is None else ego
    ex, ey = tp(e.x, e.y)
    new_ego = replace(e, x=ex, y=ey, heading=float(wrap_angle(e.heading + dtheta)))
    agents = []
    for a in scene.agents:
        ax, ay = tp(a.x, a.y)
        agents.append(replace(a, x=ax, y=ay, heading=float(wrap_angle(a.heading + dtheta))))
    return Scene(new_ego, tuple(agents), scene.corridor.transformed(rot, shift), scene.timestamp)


def to_ego_frame(scene: Scene) -> Scene:
    e = scene.ego
    return transform_scene(scene, _rot(-e.heading), -e.position, -e.heading)


def from_ego_frame(scene: Scene, pose: EgoState) -> Scene:
    """Inverse of ``to_ego_frame`` given the original ego pose."""
    rot = _rot(pose.heading)
    # p_world = rot @ p + pos  ==  rot @ (p + rot^T pos)
    shift = rot.T @ pose.position
    out = transform_scene(scene, rot, shift, pose.heading)
    return replace(out, ego=replace(out.ego, x=pose.x, y=pose.y, heading=pose.heading))


def world_to_ego(points, ego: EgoState) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64) - ego.position
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return np.stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1]], axis=-1)


def ego_to_world(points, ego: EgoState) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return np.stack([c * p[..., 0] - s * p[..., 1] + ego.x, s * p[..., 0] + c * p[..., 1] + ego.y], axis=-1)


def local_view(script: ScenarioScript, t: float, ego: EgoState, behind: float = 10.0, ahead: float = 60.0,
               radius: float = 80.0) -> Scene:
    """Ego-frame scene around ``ego``: corridor cropped to [-behind, +ahead] of its arc position."""
    world = scene_at(script, t)
    s_ego, _ = world.corridor.project(ego.position)
    corridor = world.corridor.crop(float(s_ego) - behind, float(s_ego) + ahead)
    agents = tuple(a for a in world.agents if np.hypot(a.x - ego.x, a.y - ego.y) <= radius)
    return to_ego_frame(Scene(ego, agents, corridor, world.timestamp))


def _centerline(curv_fn, length: float, step: float = 0.1) -> np.ndarray:
    n = int(round(length / step))
    s = np.arange(n + 1) * step
    k = curv_fn(s)
    heading = np.concatenate([[0.0], np.cumsum(0.5 * (k[1:] + k[:-1]) * step)])
    dx = np.cos(heading[:-1] + 0.5 * np.diff(heading)) * step
    dy = np.sin(heading[:-1] + 0.5 * np.diff(heading)) * step
    xy = np.vstack([[0.0, 0.0], np.c_[np.cumsum(dx), np.cumsum(dy)]])
    return xy[:: int(round(1.0 / step))]


def generate(kind: str, seed: int) -> ScenarioScript:
    if kind not in KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}")
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    u = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    speed_limit = u(8.0, 12.0)
    curv = 0.0
    arc = None
    params: dict = {}
    if kind == "empty-road":
        curv = u(-0.005, 0.005)
        v0 = u(3.0, 12.0)
    elif kind == "curved-road":
        kappa = u(0.02, 0.08) * (1 if rng.random() < 0.5 else -1)
        start = EGO_START_S + u(5.0, 25.0)
        span = u(math.pi / 4, math.pi / 2) / abs(kappa)
        arc = (start, span, kappa)
        v0 = u(4.0, 10.0)
        params.update(curvature=kappa, arc_start=start, arc_length=span)
    else:
        v0 = 0.0  # set per kind below

    if arc is None:
        curv_fn = lambda s: np.full_like(s, curv)  # noqa: E731
    else:
        a0, span, kappa = arc
        curv_fn = lambda s: np.where((s >= a0) & (s < a0 + span), kappa, 0.0)  # noqa: E731
    local_line = _centerline(curv_fn, EGO_START_S + ROUTE_AHEAD)

    # random world placement
    yaw = u(-math.pi, math.pi)
    offset = np.array([u(-100, 100), u(-100, 100)])
    rot = _rot(yaw)
    line = local_line @ rot.T + offset
    corridor = DrivableCorridor(line, HALF_WIDTH, speed_limit)

    def frenet(s, lat):
        p, t = corridor.point_at(np.array(s))
        nrm = np.array([-t[1], t[0]])
        return p + lat * nrm, math.atan2(t[1], t[0])

    agents = []
    if kind == "lead-vehicle-cruise":
        vl = u(3.0, 9.0)
        v0 = max(0.0, vl + u(-1.0, 2.0))
        gap = u(15.0, 35.0)
        p, h = frenet(EGO_START_S + gap, 0.0)
        agents.append(Agent(1, float(p[0]), float(p[1]), h, vl))
        params.update(gap=gap, lead_speed=vl)
    elif kind == "lead-vehicle-brake":
        vl = u(6.0, 10.0)
        v0 = max(0.0, vl + u(-1.0, 1.0))
        gap = u(20.0, 35.0)
        tb = u(1.0, 4.0)
        dec = u(2.0, 3.5)
        p, h = frenet(EGO_START_S + gap, 0.0)
        agents.append(Agent(1, float(p[0]), float(p[1]), h, vl, behavior="scripted-piecewise-speed",
                            schedule=((0.0, vl, 0.0), (tb, vl, -dec))))
        params.update(gap=gap, lead_speed=vl, brake_time=tb, decel=dec)
    elif kind == "crossing-agent":
        v0 = u(5.0, 10.0)
        ahead = u(25.0, 45.0)
        side = 1 if rng.random() < 0.5 else -1
        start_lat = side * (HALF_WIDTH + u(2.0, 6.0))
        vp = u(1.0, 2.0)
        p, h = frenet(EGO_START_S + ahead, start_lat)
        agents.append(Agent(1, float(p[0]), float(p[1]), float(wrap_angle(h - side * math.pi / 2)), vp,
                            length=0.8, width=0.8))
        params.update(crossing_s=ahead, start_lateral=start_lat, walk_speed=vp)
    elif kind == "blocked-lane":
        v0 = u(4.0, 10.0)
        ahead = u(25.0, 50.0)
        lat = u(-0.5, 0.5)
        p, h = frenet(EGO_START_S + ahead, lat)
        agents.append(Agent(1, float(p[0]), float(p[1]), h, 0.0))
        params.update(obstacle_s=ahead, obstacle_lateral=lat)

    lat0 = u(-0.3, 0.3)
    p, h = frenet(EGO_START_S, lat0)
    ego = EgoState(float(p[0]), float(p[1]), float(wrap_angle(h + u(-0.03, 0.03))), v0)
    scene = Scene(ego, tuple(agents), corridor, 0.0)
    return ScenarioScript(kind, int(seed), DURATION, scene, speed_limit, params)


# -- serialization ---------------------------------------------------------

def script_to_dict(script: ScenarioScript) -> dict:
    sc = script.scene
    return {
        "schema": SCENARIO_SCHEMA,
        "id": script.id,
        "kind": script.kind,
        "seed": script.seed,
        "duration": script.duration,
        "speed_limit": script.speed_limit,
        "params": script.params,
        "ego": [sc.ego.x, sc.ego.y, sc.ego.heading, sc.ego.speed, sc.ego.length, sc.ego.width],
        "agents": [
            {"id": a.id, "state": [a.x, a.y, a.heading, a.speed, a.length, a.width], "behavior": a.behavior,
             "schedule": [list(s) for s in a.schedule]}
            for a in sc.agents
        ],
        "centerline": sc.corridor.centerline.tolist(),
        "half_width": sc.corridor.half_width,
    }


def script_from_dict(d: dict) -> ScenarioScript:
    if d.get("schema") != SCENARIO_SCHEMA:
        raise ScenarioError(f"scenario schema {d.get('schema')!r} != {SCENARIO_SCHEMA}")
    ego = EgoState(*d["ego"])
    agents = tuple(
        Agent(a["id"], *a["state"], behavior=a["behavior"], schedule=tuple(tuple(s) for s in a["schedule"]))
        for a in d["agents"]
    )
    corridor = DrivableCorridor(d["centerline"], d["half_width"], d["speed_limit"])
    return ScenarioScript(d["kind"], d["seed"], d["duration"], Scene(ego, agents, corridor, 0.0),
                          d["speed_limit"], d.get("params", {}))
