import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factorplan.trajectory import FactorizationConfig, Trajectory, VelocityProfile, compose, factorize
from factorplan.vocabulary import (
    ConfigError,
    KMeansConfig,
    PathVocabulary,
    TrajectoryVocabulary,
    VelocityVocabulary,
    build_path_vocab,
    build_velocity_vocab,
    coverage_error,
    kmeans,
    load_vocab,
    save_vocab,
    vocab_from_json,
    vocab_to_json,
)

from helpers import smooth_trajectory, straight_trajectory

CFG = FactorizationConfig(1.0, 50.0, 0.5, 8)


def demo_set(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Trajectory(smooth_trajectory(rng), 0.5) for _ in range(n)]


def vocab_from(demos, n_p, n_v, seed=0):
    return TrajectoryVocabulary(
        build_path_vocab(demos, n_p, CFG, KMeansConfig(n_p, 100, seed)),
        build_velocity_vocab(demos, n_v, CFG, KMeansConfig(n_v, 100, seed)),
    )


# -- kmeans -----------------------------------------------------------------

def test_kmeans_square_corners():
    x = np.array([[0, 0], [1, 0], [0, 1], [1, 1.0]])
    r = kmeans(x, KMeansConfig(4, seed=3))
    assert r.cost == 0.0
    assert sorted(map(tuple, r.centroids)) == sorted(map(tuple, x))


def test_kmeans_single_cluster_is_mean():
    x = np.random.default_rng(0).normal(size=(50, 6))
    r = kmeans(x, KMeansConfig(1))
    np.testing.assert_allclose(r.centroids[0], x.mean(0), atol=1e-12)


def test_kmeans_gaussians_recovered():
    rng = np.random.default_rng(7)
    centers = np.array([[0, 0], [10, 0], [0, 10.0]])
    truth = rng.integers(0, 3, 200)
    x = centers[truth] + rng.normal(size=(200, 2))
    r = kmeans(x, KMeansConfig(3, seed=1))
    # best label permutation
    from itertools import permutations
    agree = max(np.mean(np.array(p)[r.labels] == truth) for p in permutations(range(3)))
    assert agree >= 0.95


def test_kmeans_rejects_k_above_n():
    with pytest.raises(ConfigError):
        kmeans(np.zeros((3, 2)), KMeansConfig(4))
    with pytest.raises(ConfigError):
        KMeansConfig(0)


def test_kmeans_empty_cluster_reseeded():
    # duplicated points force empty clusters during seeding; every centroid ends up used or on a sample
    x = np.array([[0, 0]] * 5 + [[5, 5]] * 5 + [[9, 0.0]])
    r = kmeans(x, KMeansConfig(3, seed=0))
    assert r.cost == 0.0


def test_kmeans_masked_union_validity():
    x = np.array([[1, 2, 0, 0], [1, 2, 3, 4.0]])
    m = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
    r = kmeans(x, KMeansConfig(1), masks=m)
    assert r.valid.all()
    np.testing.assert_allclose(r.centroids[0, 2:], [3, 4])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_kmeans_cost_non_increasing(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 5)) * rng.uniform(0.5, 4)
    m = rng.uniform(size=(40, 5)) < 0.8
    m[:, 0] = True
    r = kmeans(x, KMeansConfig(k, seed=seed), masks=m)
    h = np.array(r.cost_history)
    assert np.all(np.diff(h) <= 1e-9 * (1 + h[:-1]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_kmeans_deterministic(seed):
    x = np.random.default_rng(seed).normal(size=(30, 4))
    a = kmeans(x, KMeansConfig(4, seed=seed))
    b = kmeans(x, KMeansConfig(4, seed=seed))
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.labels, b.labels)


# -- vocab builders ---------------------------------------------------------

def test_single_straight_demo_is_anchor():
    tr = Trajectory(straight_trajectory(10.0, 0.0), 0.5)
    pv = build_path_vocab([tr], 1, CFG)
    path, _ = factorize(tr, CFG)
    np.testing.assert_allclose(pv.points[0], path.points, atol=1e-9)
    np.testing.assert_array_equal(pv.valid_mask[0], path.valid_mask)


def left_turn(rng):
    v = rng.uniform(6, 10)
    kappa = rng.uniform(0.04, 0.08)
    s = np.cumsum(np.full(8, v * 0.5))
    th = kappa * s
    return np.stack([np.sin(th) / kappa, (1 - np.cos(th)) / kappa], -1)


def test_straight_and_turn_families_separate():
    rng = np.random.default_rng(11)
    demos = [Trajectory(straight_trajectory(rng.uniform(6, 10), rng.normal(0, 0.01)), 0.5) for _ in range(20)]
    demos += [Trajectory(left_turn(rng), 0.5) for _ in range(20)]
    pv = build_path_vocab(demos, 2, CFG, KMeansConfig(2, seed=0))
    end_y = [pv.points[i][pv.valid_mask[i]][-1, 1] for i in range(2)]
    assert sorted(y > 3.0 for y in end_y) == [False, True]
    assert min(abs(y) for y in end_y) < 1.0


def test_velocity_vocab_constant():
    demos = [VelocityProfile(np.full(8, 5.0), 0.5) for _ in range(4)]
    vv = build_velocity_vocab(demos, 1, CFG)
    np.testing.assert_allclose(vv.speeds[0], 5.0)


def test_velocity_families_monotone():
    rng = np.random.default_rng(2)
    t = np.arange(8)
    acc = [VelocityProfile(3 + 1.0 * t + rng.normal(0, 0.05, 8).clip(-0.04, 0.04), 0.5) for _ in range(15)]
    dec = [VelocityProfile(12 - 1.0 * t + rng.normal(0, 0.05, 8).clip(-0.04, 0.04), 0.5) for _ in range(15)]
    vv = build_velocity_vocab(acc + dec, 2, CFG, KMeansConfig(2, seed=0))
    kinds = sorted(("up" if np.all(np.diff(a) > 0) else "down" if np.all(np.diff(a) < 0) else "?") for a in vv.speeds)
    assert kinds == ["down", "up"]


def test_velocity_anchor_clamped():
    from types import SimpleNamespace

    # raw profiles bypass the VelocityProfile validator to carry numeric noise
    demos = [SimpleNamespace(speeds=np.full(8, -1e-12)) for _ in range(3)]
    vv = build_velocity_vocab(demos, 1, CFG)
    assert np.all(vv.speeds >= 0)


def test_vocab_build_deterministic():
    demos = demo_set(60)
    a = vocab_to_json(vocab_from(demos, 8, 4, seed=5))
    b = vocab_to_json(vocab_from(demos, 8, 4, seed=5))
    assert a == b


def test_vocab_serialization_roundtrip(tmp_path):
    v = vocab_from(demo_set(40), 6, 3)
    save_vocab(v, tmp_path / "v.json")
    w = load_vocab(tmp_path / "v.json")
    assert np.array_equal(v.paths.points, w.paths.points)
    assert np.array_equal(v.paths.valid_mask, w.paths.valid_mask)
    assert np.array_equal(v.velocities.speeds, w.velocities.speeds)


def test_vocab_reader_rejects_version():
    import json

    doc = json.loads(vocab_to_json(vocab_from(demo_set(10), 2, 2)))
    doc["version"] = 99
    with pytest.raises(ConfigError):
        vocab_from_json(json.dumps(doc))


# -- entries / coverage -----------------------------------------------------

def test_entry_straight_constant():
    tr = Trajectory(straight_trajectory(8.0, 0.0), 0.5)
    v = TrajectoryVocabulary(build_path_vocab([tr], 1, CFG), build_velocity_vocab([tr], 1, CFG))
    np.testing.assert_allclose(v.entry(0, 0).waypoints, tr.waypoints, atol=1e-9)


def test_entry_zero_velocity_anchor():
    v = vocab_from(demo_set(20), 4, 2)
    z = TrajectoryVocabulary(v.paths, VelocityVocabulary(np.zeros((1, 8)), CFG, 0))
    for i in range(4):
        assert np.all(z.entry(i, 0).waypoints == 0)


def test_entry_matches_eager_table():
    v = vocab_from(demo_set(100), 16, 8)
    table = {}
    for i in range(16):
        for j in range(8):
            table[i, j] = compose(v.paths.anchor(i), v.velocities.anchor(j)).waypoints
    block = v.compose_block(np.arange(16))
    for (i, j), w in table.items():
        np.testing.assert_array_equal(v.entry(i, j).waypoints, w)
        np.testing.assert_allclose(block[i, j], w, atol=1e-12)
    with pytest.raises(IndexError):
        v.entry(16, 0)


def test_coverage_le_kmeans_cost_on_training_demos():
    # keep demos inside the path horizon so clamping plays no part
    demos = [d for d in demo_set(40) if np.linalg.norm(np.diff(d.waypoints, axis=0), axis=1).sum() < 45][:12]
    v = vocab_from(demos, 12, 12)
    assert vocab_from(demos, 12, 12).paths.size == 12
    cov = coverage_error(v, demos)
    # each demo owns its own path and velocity cluster; only factorization error remains
    assert cov["mean"] <= CFG.ds / 2


def test_coverage_exact_factors():
    tr = Trajectory(straight_trajectory(7.3, 0.4), 0.5)
    v = TrajectoryVocabulary(build_path_vocab([tr], 1, CFG), build_velocity_vocab([tr], 1, CFG))
    assert coverage_error(v, [tr])["mean"] <= CFG.ds / 2


def test_coverage_decreases_with_density():
    demos = demo_set(600, seed=3)
    held = demo_set(100, seed=4)
    means = [coverage_error(vocab_from(demos, n_p, n_v), held)["mean"] for n_p, n_v in ((16, 4), (64, 16), (256, 64))]
    assert means[0] > means[1] > means[2]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_coverage_superset_monotone(seed):
    rng = np.random.default_rng(seed)
    demos = demo_set(40, seed=seed % 1000)
    held = demo_set(10, seed=seed % 1000 + 1)
    v = vocab_from(demos, 6, 3, seed=seed % 100)
    base = coverage_error(v, held)["mean"]
    extra_p = build_path_vocab(demo_set(8, seed=seed % 1000 + 2), 2, CFG)
    more_paths = TrajectoryVocabulary(
        PathVocabulary(np.concatenate([v.paths.points, extra_p.points]),
                       np.concatenate([v.paths.valid_mask, extra_p.valid_mask]), CFG, 0),
        v.velocities,
    )
    more_vels = TrajectoryVocabulary(
        v.paths, VelocityVocabulary(np.concatenate([v.velocities.speeds, rng.uniform(0, 15, (2, 8))]), CFG, 0)
    )
    assert coverage_error(more_paths, held)["mean"] <= base + 1e-12
    assert coverage_error(more_vels, held)["mean"] <= base + 1e-12
