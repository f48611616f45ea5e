"""Tests for the procedural model generators and the voxel thinner."""

import numpy as np
import pytest

from cloudalign.geometry import bounding_radius
from cloudalign.shapes import MODEL_NAMES, make_model, model_suite, voxel_downsample


class TestVoxelDownsample:
    def test_hits_target_band(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(size=(5000, 3))
        out = voxel_downsample(pts, 800)
        assert abs(out.shape[0] - 800) <= 80

    def test_centroids_stay_inside_hull_box(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(3000, 3))
        out = voxel_downsample(pts, 500)
        assert np.all(out.min(axis=0) >= pts.min(axis=0) - 1e-12)
        assert np.all(out.max(axis=0) <= pts.max(axis=0) + 1e-12)

    def test_small_input_passthrough(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(95, 3))
        out = voxel_downsample(pts, 100)
        np.testing.assert_array_equal(out, pts)

    def test_too_few_points_rejected(self):
        pts = np.zeros((10, 3))
        with pytest.raises(ValueError):
            voxel_downsample(pts, 100)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(size=(4000, 3))
        a = voxel_downsample(pts, 600)
        b = voxel_downsample(pts, 600)
        np.testing.assert_array_equal(a, b)


class TestModels:
    @pytest.mark.parametrize("name", MODEL_NAMES)
    def test_count_radius_and_covariances(self, name):
        cloud = make_model(name, target=1000, seed=0)
        assert abs(len(cloud) - 1000) <= 100
        assert bounding_radius(cloud.points) == pytest.approx(1.0, abs=1e-9)
        # isotropic, one shared scale per model, at sample-spacing magnitude
        diag = cloud.covariances[:, 0, 0]
        assert np.allclose(cloud.covariances, diag[0] * np.eye(3)[None, :, :])
        std = np.sqrt(diag[0])
        assert 0.005 < std < 0.2

    def test_seed_determinism(self):
        a = make_model("fan", target=600, seed=7)
        b = make_model("fan", target=600, seed=7)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.covariances, b.covariances)

    def test_seeds_differ(self):
        a = make_model("wave", target=600, seed=0)
        b = make_model("wave", target=600, seed=1)
        assert a.points.shape != b.points.shape or not np.array_equal(a.points, b.points)

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError):
            make_model("teapot")

    def test_suite_has_five_distinct_models(self):
        suite = model_suite(target=400, seed=0)
        assert len(suite) == 5
        bboxes = {tuple(np.round(c.points.max(axis=0) - c.points.min(axis=0), 6)) for c in suite}
        assert len(bboxes) == 5
