import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorplan.scene import Agent, DrivableCorridor, EgoState, Scene, generate
from factorplan.teacher import (
    EvaluationError,
    MetricThresholds,
    SubScores,
    comfort_violations,
    epdms,
    epdms_array,
    oriented_rect_overlap,
    pdms,
    pdms_array,
    rect_corners,
    rect_overlap,
    score_candidate,
    teach_batch,
)
from factorplan.trajectory import Trajectory

TH = MetricThresholds()


def world(agents=(), speed=8.0, lateral=0.0):
    line = np.stack([np.arange(-20.0, 301.0), np.zeros(321)], -1)
    scene = Scene(EgoState(0.0, lateral, 0.0, speed), tuple(agents), DrivableCorridor(line, 3.5))
    return replace(generate("empty-road", 0), scene=scene)


def straight(v, T=8, dt=0.5):
    k = np.arange(1, T + 1) * v * dt
    return Trajectory(np.stack([k, np.zeros(T)], -1), dt)


# -- rectangles -------------------------------------------------------------

def test_rect_examples():
    assert not oriented_rect_overlap((0, 0, 0, 1, 1), (3, 0, 0, 1, 1))
    assert oriented_rect_overlap((0, 0, 0, 4.5, 2), (0, 0, 0, 4.5, 2))
    # unit square rotated 45 deg pokes its corner 0.01 m into the other
    half_diag = math.sqrt(2) / 2
    assert oriented_rect_overlap((0, 0, 0, 1, 1), (0.5 + half_diag - 0.01, 0, math.pi / 4, 1, 1))
    assert not oriented_rect_overlap((0, 0, 0, 1, 1), (0.5 + half_diag + 0.01, 0, math.pi / 4, 1, 1))
    with pytest.raises(ValueError):
        oriented_rect_overlap((0, 0, 0, 0, 1), (0, 0, 0, 1, 1))


def _inside(pts, c, h, l, w, tol=1e-9):
    d = pts - c
    u = d[..., 0] * math.cos(h) + d[..., 1] * math.sin(h)
    v = -d[..., 0] * math.sin(h) + d[..., 1] * math.cos(h)
    return (np.abs(u) <= l / 2 + tol) & (np.abs(v) <= w / 2 + tol)


def _boundary(c, h, l, w, step=0.004):
    corners = rect_corners(np.asarray(c, float), np.asarray(h, float), l, w)
    out = [corners]
    for k in range(4):
        a, b = corners[k], corners[(k + 1) % 4]
        n = int(np.ceil(np.linalg.norm(b - a) / step))
        t = np.linspace(0, 1, n + 1)[:, None]
        out.append(a + t * (b - a))
    return np.vstack(out)


def _depth(ca, ha, la, wa, cb, hb, lb, wb):
    d = np.asarray(cb) - np.asarray(ca)
    axes = [(math.cos(ha), math.sin(ha)), (-math.sin(ha), math.cos(ha)),
            (math.cos(hb), math.sin(hb)), (-math.sin(hb), math.cos(hb))]
    out = np.inf
    for n in axes:
        n = np.array(n)
        ra = la / 2 * abs(np.dot((math.cos(ha), math.sin(ha)), n)) + wa / 2 * abs(np.dot((-math.sin(ha), math.cos(ha)), n))
        rb = lb / 2 * abs(np.dot((math.cos(hb), math.sin(hb)), n)) + wb / 2 * abs(np.dot((-math.sin(hb), math.cos(hb)), n))
        out = min(out, ra + rb - abs(np.dot(d, n)))
    return out


def test_sat_matches_sampling_oracle():
    rng = np.random.default_rng(2024)
    disagreements = 0
    n = 10_000
    for _ in range(n):
        la, wa, lb, wb = rng.uniform(0.5, 5.0, 4)
        ha, hb = rng.uniform(-math.pi, math.pi, 2)
        direction = rng.uniform(-math.pi, math.pi)
        # centre distance concentrated around first contact
        reach = 0.5 * (math.hypot(la, wa) + math.hypot(lb, wb))
        dist = rng.uniform(0.0, 1.1) * reach
        ca = np.zeros(2)
        cb = dist * np.array([math.cos(direction), math.sin(direction)])
        sat = bool(rect_overlap(ca, ha, la, wa, cb, hb, lb, wb))
        oracle = (_inside(_boundary(ca, ha, la, wa), cb, hb, lb, wb).any()
                  or _inside(_boundary(cb, hb, lb, wb), ca, ha, la, wa).any())
        if sat != oracle:
            depth = _depth(ca, ha, la, wa, cb, hb, lb, wb)
            assert sat and depth < 1e-3, (ca, ha, la, wa, cb, hb, lb, wb, depth)
            disagreements += 1
    assert disagreements < n * 0.01


# -- metrics ------------------------------------------------------------------

def test_empty_road_straight_all_pass():
    s = score_candidate(straight(8.0), world(), 0.0, TH)
    assert (s.nc, s.dac, s.ttc, s.comfort, s.lk, s.ep) == (1, 1, 1, 1, 1, 1)


def test_static_agent_collision():
    sc = world([Agent(1, 12.0, 0.0, 0.0, 0.0)])
    s = score_candidate(straight(8.0), sc, 0.0, TH)
    assert s.nc == 0 and pdms(s) == 0.0


def test_ttc_flags_imminent_collision():
    # stop 2.5 m short of a parked car: no contact, but the constant-velocity
    # projection of the still-moving steps reaches it within one second
    sc = world([Agent(1, 40.0, 0.0, 0.0, 0.0)], speed=10.0)
    v = np.array([10.0] * 6 + [4.0, 2.0])
    w = np.stack([np.cumsum(v * 0.5), np.zeros(8)], -1)
    ttc_hit = score_candidate(Trajectory(w, 0.5), sc, 0.0, TH)
    assert ttc_hit.nc == 1 and ttc_hit.ttc == 0
    slow = score_candidate(straight(1.0), sc, 0.0, TH)
    assert slow.nc == 1 and slow.ttc == 1


def test_dac_and_lk():
    out = score_candidate(straight(8.0), world(lateral=3.2), 0.0, TH)
    assert out.dac == 0 and out.lk == 0
    near = score_candidate(straight(8.0), world(lateral=2.4), 0.0, TH)
    assert near.dac == 1 and near.lk == 1


def test_comfort_speed_step_flag_index():
    v = np.array([8.0, 8.0, 8.0, 13.0, 13.0, 13.0, 13.0, 13.0])
    w = np.stack([np.cumsum(v * 0.5), np.zeros(8)], -1)
    flags = comfort_violations(w, 8.0, 0.5, TH)
    # independent oracle: interval speeds, current speed half an interval before the first
    t = np.concatenate([[0.0], 0.25 + 0.5 * np.arange(8)])
    sp = np.concatenate([[8.0], np.hypot(*np.diff(np.vstack([[0, 0], w]), axis=0).T) / 0.5])
    acc = np.diff(sp) / np.diff(t)
    assert np.array_equal(np.flatnonzero(flags["accel"]), np.flatnonzero(np.abs(acc) > TH.max_abs_accel))
    assert np.flatnonzero(flags["accel"]).tolist() == [3]
    assert score_candidate(Trajectory(w, 0.5), world(), 0.0, TH).comfort == 0


def test_lateral_accel_flag():
    # tight circle at speed: v^2 / r well above 4 m/s^2
    r, v = 10.0, 10.0
    s = np.arange(1, 9) * v * 0.5
    th = s / r
    w = np.stack([r * np.sin(th), r * (1 - np.cos(th))], -1)
    assert comfort_violations(w, v, 0.5, TH)["lat_accel"].any()


def test_horizon_past_duration():
    sc = world()
    with pytest.raises(EvaluationError):
        score_candidate(straight(5.0), sc, sc.duration - 2.0, TH)


# -- batch EP -------------------------------------------------------------------

def test_teach_batch_ep_examples():
    sc = world()
    assert teach_batch([straight(6.0)], sc, 0.0, TH)[0].ep == 1.0
    a, b = teach_batch([straight(2.5), straight(1.25)], sc, 0.0, TH)
    assert (a.ep, b.ep) == pytest.approx((1.0, 0.5))
    blocked = world([Agent(1, 3.0, 0.0, 0.0, 0.0)])
    assert [s.ep for s in teach_batch([straight(2.5), straight(5.0)], blocked, 0.0, TH)] == [0.0, 0.0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_teach_batch_ep_range(seed):
    rng = np.random.default_rng(seed)
    sc = world([Agent(1, float(rng.uniform(10, 60)), float(rng.uniform(-3, 3)), 0.0, float(rng.uniform(0, 5)))])
    cands = []
    for _ in range(6):
        v = rng.uniform(0, 14, 8)
        y = rng.uniform(-4, 4)
        cands.append(Trajectory(np.stack([np.cumsum(v * 0.5), np.linspace(0, y, 8)], -1), 0.5))
    out = teach_batch(cands, sc, 0.0, TH)
    ep = np.array([s.ep for s in out])
    assert np.all((0 <= ep) & (ep <= 1))
    if any(s.nc * s.dac > 0 for s in out):
        assert ep.max() == 1.0


# -- aggregation ----------------------------------------------------------------

def test_pdms_examples():
    assert pdms(SubScores()) == 1.0
    assert pdms(SubScores(nc=0)) == 0.0
    assert pdms(SubScores(ep=0.4)) == pytest.approx(0.75)


def test_epdms_examples():
    assert epdms(SubScores()) == 1.0
    assert epdms(SubScores(tl=0)) == 0.0
    assert epdms(SubScores(comfort=0, ec=0)) == pytest.approx(0.75)


unit = st.floats(0, 1)
binary = st.sampled_from([0.0, 1.0])
subs = st.builds(SubScores, nc=binary, dac=binary, ttc=binary, comfort=binary, ep=unit, lk=binary)


@given(subs, st.sampled_from(["nc", "dac", "ttc", "comfort", "ep", "lk"]), unit)
def test_aggregates_bounded_monotone_gated(s, name, bump):
    base = np.array([pdms(s), epdms(s)])
    assert np.all((0 <= base) & (base <= 1))
    up = replace(s, **{name: max(getattr(s, name), bump)})
    assert pdms(up) >= pdms(s) - 1e-15 and epdms(up) >= epdms(s) - 1e-15
    if s.nc == 0 or s.dac == 0:
        assert pdms(s) == 0 and epdms(s) == 0
    np.testing.assert_allclose(pdms_array(s.as_array()[None])[0], pdms(s), atol=1e-15)
    np.testing.assert_allclose(epdms_array(s.as_array()[None])[0], epdms(s), atol=1e-15)


def test_subscores_range_checked():
    with pytest.raises(ValueError):
        SubScores(ep=1.5)
    with pytest.raises(ValueError):
        MetricThresholds(ttc_horizon=0)
