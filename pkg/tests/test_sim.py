import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorplan.expert import ExpertPlanner
from factorplan.scene import EgoState, generate
from factorplan.sim import (
    ACCEL_BOUNDS,
    MAX_STEER,
    WHEELBASE,
    ControlCommand,
    EpisodeError,
    VehicleState,
    control_from_plan,
    preview_distance,
    run_episode,
    step_dynamics,
)
from factorplan.trajectory import Trajectory


def heading_line(v, heading, T=8, dt=0.5):
    k = np.arange(1, T + 1) * v * dt
    return Trajectory(np.stack([k * math.cos(heading), k * math.sin(heading)], -1), dt)


def test_preview_distance_formula():
    assert preview_distance(5.0) == 5.0
    assert preview_distance(0.0) == 2.5
    assert preview_distance(10.0) == 7.5
    with pytest.raises(ValueError):
        preview_distance(-0.1)


@given(st.floats(0, 40))
def test_preview_distance_linear(v):
    assert preview_distance(v) == pytest.approx(0.5 * v + 2.5, abs=1e-12)


def test_control_dead_ahead_and_matched_speed():
    cmd = control_from_plan(heading_line(6.0, 0.0), EgoState(0, 0, 0, 6.0))
    assert cmd.steering == 0.0
    assert cmd.acceleration == pytest.approx(0.0, abs=1e-12)


def test_control_bearing_30_degrees():
    cmd = control_from_plan(heading_line(5.0, math.radians(30)), EgoState(0, 0, 0, 5.0))
    assert cmd.steering == pytest.approx(math.atan(2 * WHEELBASE * 0.5 / 5.0), abs=1e-9)
    assert cmd.steering == pytest.approx(0.4951, abs=1e-4)


def test_control_speed_gain_and_clamps():
    cmd = control_from_plan(heading_line(6.0, 0.0), EgoState(0, 0, 0, 5.0))
    assert cmd.acceleration == pytest.approx(1.5, abs=1e-12)
    cmd = control_from_plan(heading_line(20.0, 0.0), EgoState(0, 0, 0, 0.0))
    assert cmd.acceleration == ACCEL_BOUNDS[1]
    cmd = control_from_plan(heading_line(3.0, 1.4), EgoState(0, 0, 0, 3.0))
    assert cmd.steering == MAX_STEER


def test_control_masked_path_brakes():
    cmd = control_from_plan(Trajectory(np.zeros((8, 2)), 0.5), EgoState(0, 0, 0, 7.0))
    assert (cmd.steering, cmd.acceleration) == (0.0, ACCEL_BOUNDS[0])


def test_command_bounds_enforced():
    with pytest.raises(ValueError):
        ControlCommand(0.7, 0.0)
    with pytest.raises(ValueError):
        ControlCommand(0.0, -7.0)


def test_step_dynamics_examples():
    s = step_dynamics(VehicleState(0, 0, 0, 10.0), ControlCommand(0.0, 0.0))
    assert (s.x, s.y, s.speed) == (pytest.approx(1.0), 0.0, 10.0)
    s = step_dynamics(VehicleState(0, 0, 0, 0.3), ControlCommand(0.0, -6.0))
    assert s.speed == 0.0


@pytest.mark.parametrize("delta", [0.05, -0.2, 0.5])
def test_constant_steer_traces_circle(delta):
    v, dt = 8.0, 0.1
    state = VehicleState(0, 0, 0, v)
    R = WHEELBASE / math.tan(delta)
    for k in range(1, 51):
        state = step_dynamics(state, ControlCommand(delta, 0.0), dt)
        th = v * k * dt / R
        assert math.hypot(state.x - R * math.sin(th), state.y - R * (1 - math.cos(th))) < 1e-3


@settings(max_examples=100)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-math.pi, math.pi), st.floats(0, 30),
       st.integers(1, 80))
def test_zero_controls_straight_line(x, y, h, v, n):
    state = VehicleState(x, y, h, v)
    for _ in range(n):
        state = step_dynamics(state, ControlCommand(0.0, 0.0))
    d = np.array([state.x - x, state.y - y])
    # displacement is along the initial heading and of exact length
    assert abs(-d[0] * math.sin(h) + d[1] * math.cos(h)) < 1e-9
    assert np.linalg.norm(d) == pytest.approx(v * 0.1 * n, rel=1e-9, abs=1e-9)
    assert state.speed == v


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_controls_in_bounds_speed_nonnegative(seed):
    rng = np.random.default_rng(seed)
    state = VehicleState(0, 0, 0, float(rng.uniform(0, 15)))
    for _ in range(20):
        steps = rng.uniform(0, 8, (8, 1)) * np.stack([np.ones(8), rng.uniform(-1, 1, 8)], -1)
        cmd = control_from_plan(Trajectory(np.cumsum(steps, 0), 0.5), state)
        assert abs(cmd.steering) <= MAX_STEER and ACCEL_BOUNDS[0] <= cmd.acceleration <= ACCEL_BOUNDS[1]
        for _ in range(5):
            state = step_dynamics(state, cmd)
            assert state.speed >= 0


# -- episodes ----------------------------------------------------------------------

def stationary(script, t, state):
    return Trajectory(np.zeros((8, 2)), 0.5), {}


def test_stationary_planner_on_empty_road():
    sc = generate("empty-road", 4)
    rep = run_episode(sc, stationary)
    assert not rep.collision
    # the ego only covers its braking distance from the initial speed
    v0 = sc.scene.ego.speed
    assert rep.progress <= v0 ** 2 / (2 * 6.0) + v0 * 0.1 + 1e-9
    assert rep.trace[-1][4] == 0.0
    assert rep.completion < 0.15


def test_expert_completes_empty_road():
    sc = generate("empty-road", 5)
    rep = run_episode(sc, ExpertPlanner())
    assert not rep.collision and rep.completion >= 0.99
    assert rep.success


def test_episode_deterministic():
    sc = generate("lead-vehicle-brake", 2)
    a = run_episode(sc, ExpertPlanner(), route_length=80.0)
    b = run_episode(sc, ExpertPlanner(), route_length=80.0)
    assert a.to_json() == b.to_json()
    assert a.trace_csv() == b.trace_csv()
    assert a.trace_csv().splitlines()[0] == "t,x,y,heading,speed,steering,accel,i,j"


def test_collision_detected_when_ignoring_lead():
    sc = generate("lead-vehicle-brake", 3)

    def blind(script, t, state):
        return Trajectory(np.stack([np.arange(1, 9) * 7.5, np.zeros(8)], -1), 0.5), {}

    rep = run_episode(sc, blind, route_length=100.0)
    assert rep.collision


def test_planner_failure_aborts():
    def broken(script, t, state):
        raise RuntimeError("boom")

    with pytest.raises(EpisodeError, match="planner failed"):
        run_episode(generate("empty-road", 0), broken, route_length=10.0)
