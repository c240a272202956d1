import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biflow.geometry import (
    PointCloud,
    furthest_point_sample,
    interpolate,
    interpolation_weights,
    knn_group,
    warp,
)
from biflow.synthdata import rotation_matrix


def brute_fps(x, n_out, seed=0):
    """Literal max-min greedy: recompute every candidate's min distance each round."""
    picks = [seed]
    for _ in range(n_out - 1):
        best, best_d = None, -1.0
        for i in range(len(x)):
            if i in picks:
                continue
            d = min(float(np.sum((x[i] - x[j]) ** 2)) for j in picks)
            if d > best_d:
                best, best_d = i, d
        picks.append(best)
    return picks


def brute_knn(q, ref, k):
    out = []
    for p in q:
        d = [(float(np.sum((p - r) ** 2)), j) for j, r in enumerate(ref)]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def _cloud(coords, feats=None):
    coords = np.asarray(coords, dtype=float)
    if feats is None:
        feats = np.ones((len(coords), 1))
    return PointCloud(coords, np.asarray(feats, dtype=float))


class TestFurthestPointSample:
    def test_collinear_endpoints(self):
        x = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        assert list(furthest_point_sample(x, 2, 0)) == [0, 3]

    def test_exhaustion_is_permutation(self):
        x = np.random.default_rng(0).normal(size=(17, 3))
        assert sorted(furthest_point_sample(x, 17)) == list(range(17))

    def test_matches_brute_force_oracle(self):
        x = np.random.default_rng(1).normal(size=(8, 3))
        assert list(furthest_point_sample(x, 3)) == brute_fps(x, 3)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 2**31 - 1))
    def test_every_prefix_is_max_min(self, n, seed):
        x = np.random.default_rng(seed).normal(size=(n, 3))
        m = max(2, n // 2)
        assert list(furthest_point_sample(x, m)) == brute_fps(x, m)

    def test_too_many_rejected(self):
        with pytest.raises(ValueError, match="n_out=5"):
            furthest_point_sample(np.zeros((4, 3)), 5)

    def test_distinct(self):
        x = np.random.default_rng(2).normal(size=(40, 3))
        picks = furthest_point_sample(x, 25, seed_index=7)
        assert picks[0] == 7 and len(set(picks.tolist())) == 25


class TestKnn:
    def test_coincident(self):
        ref = np.random.default_rng(0).normal(size=(6, 3))
        assert knn_group(ref[3:4], ref, 1)[0, 0] == 3

    def test_line(self):
        ref = np.array([[0, 0, 0], [10, 0, 0], [20, 0, 0]], dtype=float)
        assert list(knn_group(np.array([[1.0, 0, 0]]), ref, 2)[0]) == [0, 1]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(3)
        ref, q = rng.normal(size=(50, 3)), rng.normal(size=(12, 3))
        np.testing.assert_array_equal(knn_group(q, ref, 7), brute_knn(q, ref, 7))

    def test_ties_break_to_lowest_index(self):
        ref = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [5, 5, 5]], dtype=float)
        np.testing.assert_array_equal(knn_group(np.zeros((1, 3)), ref, 2), [[0, 1]])
        np.testing.assert_array_equal(knn_group(np.zeros((1, 3)), ref, 3), [[0, 1, 2]])

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_group(np.zeros((1, 3)), np.zeros((2, 3)), 3)

    def test_accepts_point_cloud(self):
        ref = _cloud([[0, 0, 0], [1, 1, 1]])
        assert knn_group(np.array([[0.9, 0.9, 0.9]]), ref, 1)[0, 0] == 1

    def test_rigid_equivariance(self):
        rng = np.random.default_rng(4)
        ref, q = rng.normal(size=(30, 3)), rng.normal(size=(10, 3))
        R = rotation_matrix(np.array([0.3, -1.0, 0.5]), 0.7)
        t = np.array([3.0, -2.0, 1.0])
        np.testing.assert_array_equal(knn_group(q, ref, 5), knn_group(q @ R.T + t, ref @ R.T + t, 5))


class TestInterpolate:
    def test_coincident_exact(self):
        sparse = _cloud([[0, 0, 0], [1, 0, 0], [0, 2, 0]], [[0.1], [0.7], [1.3]])
        out = interpolate(sparse, np.array([[1.0, 0, 0]]), k=3)
        assert out[0, 0] == 0.7

    def test_midpoint(self):
        sparse = _cloud([[0, 0, 0], [2, 0, 0]], [[0.0], [2.0]])
        assert interpolate(sparse, np.array([[1.0, 0, 0]]), k=2)[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_hand_weights(self):
        sparse = _cloud([[1, 0, 0], [-2, 0, 0]], [[0.0], [3.0]])
        assert interpolate(sparse, np.zeros((1, 3)), k=2)[0, 0] == pytest.approx(1.0, abs=1e-14)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            interpolate(_cloud([[0, 0, 0]]), np.zeros((1, 3)), k=3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 30), st.integers(1, 20), st.integers(0, 2**31 - 1))
    def test_convex_combination(self, n_sparse, n_dense, seed):
        rng = np.random.default_rng(seed)
        sparse = _cloud(rng.normal(size=(n_sparse, 3)), rng.normal(size=(n_sparse, 4)))
        dense = rng.normal(size=(n_dense, 3))
        idx, w = interpolation_weights(sparse.coords, dense, 3)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        out = interpolate(sparse, dense, 3)
        contrib = sparse.feats[idx]
        assert np.all(out >= contrib.min(axis=1) - 1e-12)
        assert np.all(out <= contrib.max(axis=1) + 1e-12)


class TestWarp:
    def test_zero_flow(self):
        x = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(warp(x, np.zeros_like(x)), x)

    def test_constant_translation(self):
        x = np.random.default_rng(1).normal(size=(5, 3))
        t = np.full_like(x, 0.25)
        np.testing.assert_array_equal(warp(x, t), x + 0.25)
        w = warp(x, t)
        np.testing.assert_allclose(w[1:] - w[:-1], x[1:] - x[:-1], atol=1e-12)

    def test_inverse(self):
        rng = np.random.default_rng(2)
        x, v = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        np.testing.assert_allclose(warp(warp(x, v), -v), x, atol=1e-12, rtol=0)

    def test_extent_mismatch(self):
        with pytest.raises(ValueError):
            warp(np.zeros((3, 3)), np.zeros((2, 3)))


def test_point_cloud_validates_shapes():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros((4, 1)))
