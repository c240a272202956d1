import numpy as np
import pytest

from biflow.geometry import pairwise_sq_dists, warp
from biflow.synthdata import (
    SceneSpec,
    generate_pair,
    make_dataset,
    occlude,
    resample_noncorresponding,
    sample_scene,
)

NOISE_BOUND = 6.0  # in units of sigma


def test_identity_motion():
    spec = SceneSpec(n_points=64, max_rotation=0.0, max_translation=0.0, noise_sigma=0.0, seed=3)
    pair, gt, mask = generate_pair(spec)
    np.testing.assert_array_equal(gt, 0.0)
    np.testing.assert_array_equal(pair.target.coords, pair.source.coords)
    assert mask.all()


def test_pure_translation():
    spec = SceneSpec(n_points=50, n_objects=1, max_rotation=0.0, noise_sigma=0.0, seed=4)
    _, gt, _ = generate_pair(spec)
    t = sample_scene(spec).objects[0].translation
    np.testing.assert_allclose(gt, np.tile(t, (50, 1)), atol=1e-12, rtol=0)


def test_rotation_about_origin():
    # extent 0 puts the object centre (the rotation pivot) at the origin
    spec = SceneSpec(n_points=40, n_objects=1, max_translation=0.0, noise_sigma=0.0, extent=0.0, seed=5)
    pair, gt, _ = generate_pair(spec)
    R = sample_scene(spec).objects[0].rotation
    x = pair.source.coords
    for xi, gi in zip(x, gt):
        np.testing.assert_allclose(gi, R @ xi - xi, atol=1e-12, rtol=0)


def test_deterministic():
    a = generate_pair(SceneSpec(seed=9))
    b = generate_pair(SceneSpec(seed=9))
    assert a[0].source.coords.tobytes() == b[0].source.coords.tobytes()
    assert a[0].target.coords.tobytes() == b[0].target.coords.tobytes()
    assert a[1].tobytes() == b[1].tobytes()


def test_ones_features():
    pair, _, _ = generate_pair(SceneSpec(n_points=20, feat_channels=2, seed=1))
    np.testing.assert_array_equal(pair.source.feats, np.ones((20, 2)))


@pytest.mark.parametrize("seed", range(4))
def test_warp_by_gt_hits_target_within_noise(seed):
    spec = SceneSpec(seed=seed)
    pair, gt, _ = generate_pair(spec)
    resid = np.linalg.norm(warp(pair.source.coords, gt) - pair.target.coords, axis=1)
    assert resid.max() <= NOISE_BOUND * spec.noise_sigma


def test_rigidity_per_object():
    spec = SceneSpec(n_points=90, noise_sigma=0.0, seed=6)
    pair, gt, _ = generate_pair(spec)
    scene = sample_scene(spec)
    start = 0
    for n in scene.counts:
        x = pair.source.coords[start : start + n]
        y = x + gt[start : start + n]
        np.testing.assert_allclose(pairwise_sq_dists(x, x) ** 0.5, pairwise_sq_dists(y, y) ** 0.5,
                                   atol=1e-9, rtol=0)
        start += n


class TestNoncorresponding:
    def test_equal_seed_coincides(self):
        spec = SceneSpec(n_points=60, noise_sigma=0.0, seed=2)
        pair, gt, _ = generate_pair(spec)
        again = resample_noncorresponding(pair, spec, target_seed=spec.seed)
        np.testing.assert_allclose(again.target.coords, pair.source.coords + gt, atol=1e-12, rtol=0)

    def test_no_exact_twins(self):
        spec = SceneSpec(n_points=80, seed=2)
        pair, gt, _ = generate_pair(spec)
        other = resample_noncorresponding(pair, spec)
        d = pairwise_sq_dists(pair.source.coords + gt, other.target.coords)
        assert d.min() > 0.0

    @pytest.mark.parametrize("seed", range(3))
    def test_gt_lands_on_moved_surface(self, seed):
        spec = SceneSpec(n_points=100, seed=seed)
        scene = sample_scene(spec)
        pair, gt, _ = generate_pair(spec)
        moved = pair.source.coords + gt
        start = 0
        for obj, n in zip(scene.objects, scene.counts):
            dist = obj.surface_distance(obj.unmove(moved[start : start + n]))
            assert dist.max() <= NOISE_BOUND * spec.noise_sigma
            start += n

    def test_dataset_items_differ(self):
        data = make_dataset(SceneSpec(n_points=32, seed=10), 3)
        assert len(data) == 3
        assert not np.array_equal(data[0][0].source.coords, data[1][0].source.coords)


class TestOcclusion:
    def test_zero_fraction(self):
        spec = SceneSpec(n_points=40, seed=1)
        pair, gt, _ = generate_pair(spec)
        out, gt2, mask = occlude(pair, gt, spec, 0.0)
        assert mask.all() and out is pair and gt2 is gt

    def test_fraction_rejected(self):
        spec = SceneSpec(n_points=40, seed=1)
        pair, gt, _ = generate_pair(spec)
        with pytest.raises(ValueError):
            occlude(pair, gt, spec, 1.0)
        with pytest.raises(ValueError):
            SceneSpec(occlusion=1.0)

    @pytest.mark.parametrize("f", [0.1, 0.3, 0.5])
    def test_rate_over_seeds(self, f):
        shares = []
        for seed in range(10):
            _, gt, mask = generate_pair(SceneSpec(n_points=200, occlusion=f, seed=seed))
            shares.append(1.0 - mask.mean())
            assert len(gt) == 200
        assert abs(np.mean(shares) - f) <= 0.1

    def test_target_points_removed(self):
        spec = SceneSpec(n_points=200, occlusion=0.3, seed=8)
        pair, _, mask = generate_pair(spec)
        assert pair.target.n < 200 and pair.source.n == 200 and (~mask).any()


def test_infeasible_spec():
    with pytest.raises(ValueError):
        SceneSpec(n_points=2, n_objects=3)
    with pytest.raises(ValueError):
        SceneSpec(shapes=("torus",))
    with pytest.raises(ValueError):
        SceneSpec(noise_sigma=-1.0)
