"""Closed-loop episodes: plan -> preview-point control -> kinematic bicycle."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import EgoState, ScenarioScript, agents_state_array, wrap_angle
from .teacher import rect_overlap
from .trajectory import FactorizationConfig, Trajectory, factorize

WHEELBASE = 2.7
MAX_STEER = 0.6
ACCEL_BOUNDS = (-6.0, 3.0)
SPEED_GAIN = 1.5
REPORT_SCHEMA = "episode/v1"


class EpisodeError(RuntimeError):
    pass


@dataclass(frozen=True)
class VehicleState(EgoState):
    wheelbase: float = WHEELBASE


@dataclass(frozen=True)
class ControlCommand:
    steering: float
    acceleration: float

    def __post_init__(self):
        if abs(self.steering) > MAX_STEER + 1e-12:
            raise ValueError(f"steering {self.steering} outside +-{MAX_STEER}")
        if not ACCEL_BOUNDS[0] - 1e-12 <= self.acceleration <= ACCEL_BOUNDS[1] + 1e-12:
            raise ValueError(f"acceleration {self.acceleration} outside {ACCEL_BOUNDS}")


def preview_distance(ego_speed: float) -> float:
    if ego_speed < 0:
        raise ValueError("speed must be non-negative")
    return 0.5 * ego_speed + 2.5


def control_from_plan(plan: Trajectory, ego: EgoState, cfg: FactorizationConfig | None = None,
                      wheelbase: float = WHEELBASE) -> ControlCommand:
    cfg = cfg or FactorizationConfig(dt=plan.dt, horizon_T=plan.T)
    path, vel = factorize(plan, cfg)
    n = path.n_valid
    if n == 0:
        return ControlCommand(0.0, ACCEL_BOUNDS[0])
    d = preview_distance(ego.speed)
    cum = np.arange(1, n + 1) * path.ds
    k = int(np.argmin(np.abs(cum - d)))
    px, py = path.points[k]
    alpha = math.atan2(py, px)
    look = math.hypot(px, py)
    steer = math.atan(2.0 * wheelbase * math.sin(alpha) / look)
    accel = SPEED_GAIN * (float(vel.speeds[0]) - ego.speed)
    return ControlCommand(float(np.clip(steer, -MAX_STEER, MAX_STEER)), float(np.clip(accel, *ACCEL_BOUNDS)))


def step_dynamics(state: EgoState, cmd: ControlCommand, sim_dt: float = 0.1,
                  wheelbase: float = WHEELBASE) -> EgoState:
    """Kinematic bicycle; the pose follows the exact arc of the step."""
    v = state.speed
    dh = v / wheelbase * math.tan(cmd.steering) * sim_dt
    dist = v * sim_dt
    half = 0.5 * dh
    chord = dist * (math.sin(half) / half if abs(half) > 1e-12 else 1.0)
    mean_h = state.heading + half
    return type(state)(
        **{
            **asdict(state),
            "x": state.x + chord * math.cos(mean_h),
            "y": state.y + chord * math.sin(mean_h),
            "heading": float(wrap_angle(state.heading + dh)),
            "speed": max(0.0, v + cmd.acceleration * sim_dt),
        }
    )


@dataclass
class EpisodeReport:
    scenario_id: str
    collision: bool
    completion: float
    comfort_violations: list = field(default_factory=list)
    mean_speed: float = 0.0
    progress: float = 0.0
    plan_log: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    @property
    def success(self) -> bool:
        return (not self.collision) and self.completion >= 0.8

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "scenario_id": self.scenario_id,
            "collision": self.collision,
            "completion": self.completion,
            "comfort_violations": self.comfort_violations,
            "n_comfort_violations": int(sum(self.comfort_violations)),
            "mean_speed": self.mean_speed,
            "progress": self.progress,
            "success": self.success,
            "plan_log": self.plan_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "y", "heading", "speed", "steering", "accel", "i", "j"])
        w.writerows(self.trace)
        return buf.getvalue()


def default_episode_length(script: ScenarioScript) -> float:
    # leaves room for the expert's 4 s plan plus its 2 s safety look-ahead
    return script.duration - 6.0


_ROUTE_CACHE: dict = {}


def reference_route_length(script: ScenarioScript, episode_length: float, replan_hz: float = 2.0,
                           sim_dt: float = 0.1) -> float:
    """Progress of the scripted expert over the same episode (floor 1 m)."""
    from .expert import ExpertPlanner

    key = (script.id, episode_length, replan_hz, sim_dt)
    if key not in _ROUTE_CACHE:
        rep = run_episode(script, ExpertPlanner(), replan_hz, sim_dt, episode_length, route_length=1.0,
                          stop_on_collision=False)
        _ROUTE_CACHE[key] = max(rep.progress, 1.0)
    return _ROUTE_CACHE[key]


def run_episode(script: ScenarioScript, planner, replan_hz: float = 2.0, sim_dt: float = 0.1,
                episode_length: float | None = None, route_length: float | None = None,
                stop_on_collision: bool = True, th_lat: float = 4.0, th_accel: float = 3.0) -> EpisodeReport:
    """``planner(script, t, state) -> (Trajectory, info)`` is called at ``replan_hz``."""
    length = default_episode_length(script) if episode_length is None else episode_length
    if route_length is None:
        route_length = reference_route_length(script, length, replan_hz, sim_dt)
    steps_per_plan = int(round(1.0 / (replan_hz * sim_dt)))
    n_steps = int(round(length / sim_dt))
    corridor = script.scene.corridor
    e0 = script.scene.ego
    state = VehicleState(e0.x, e0.y, e0.heading, e0.speed, e0.length, e0.width)
    s_start = float(corridor.project(state.position[None])[0][0])
    best = 0.0
    collision = False
    comfort, speeds, log, trace = [], [], [], []
    cmd = ControlCommand(0.0, 0.0)
    choice = (-1, -1)
    for k in range(n_steps):
        t = k * sim_dt
        if k % steps_per_plan == 0:
            try:
                plan, info = planner(script, t, state)
                cmd = control_from_plan(plan, state)
            except Exception as exc:  # noqa: BLE001
                raise EpisodeError(f"{script.id}: planner failed at t={t:.2f}s: {exc!r}") from exc
            choice = tuple(int(v) for v in (info or {}).get("choice", (-1, -1)))
            log.append({"t": round(t, 6), "x": state.x, "y": state.y, "heading": state.heading,
                        "speed": state.speed, "choice": list(choice)})
        trace.append([round(t, 6), state.x, state.y, state.heading, state.speed, cmd.steering, cmd.acceleration,
                      *choice])
        lat = state.speed ** 2 * math.tan(cmd.steering) / state.wheelbase
        comfort.append(bool(abs(lat) > th_lat or abs(cmd.acceleration) > th_accel))
        state = step_dynamics(state, cmd, sim_dt)
        speeds.append(state.speed)
        s_now = float(corridor.project(state.position[None])[0][0])
        best = max(best, s_now - s_start)
        ag = agents_state_array(script.scene.agents, min((k + 1) * sim_dt, script.duration))
        if len(ag):
            hit = rect_overlap(state.position, state.heading, state.length, state.width,
                               ag[:, :2], ag[:, 2], ag[:, 4], ag[:, 5])
            if np.any(hit):
                collision = True
                if stop_on_collision:
                    break
    rep = EpisodeReport(
        scenario_id=script.id,
        collision=collision,
        completion=float(min(1.0, best / route_length)),
        comfort_violations=comfort,
        mean_speed=float(np.mean(speeds)) if speeds else 0.0,
        progress=best,
        plan_log=log,
        trace=trace,
    )
    return rep
