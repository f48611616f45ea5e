"""Tests for the mixture-overlap energy: kernels, pair weights, pose objective."""

import numpy as np
import pytest

from cloudalign.energy import (
    EnergyContext,
    GridSpec,
    gaussian_kernel,
    objective,
    objective_gradient,
    oracle_energy_grid,
    oracle_expected_loss,
    pair_coefficients,
    proximity_weight,
)
from cloudalign.geometry import PointCloud, PoseParams, RigidTransform, apply_transform


def random_spd(rng, d, scale=1.0):
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T + np.eye(d) * d * 0.3)


def random_cloud(rng, n, d, spread=2.0, cov_scale=1.0):
    pts = rng.normal(size=(n, d)) * spread
    covs = np.stack([random_spd(rng, d, cov_scale) for _ in range(n)])
    return PointCloud(pts, covs)


def random_pose(rng, d, angle=0.8, shift=1.0):
    if d == 2:
        rot = rng.uniform(-angle, angle, size=1)
    else:
        rot = rng.normal(size=3)
        rot *= rng.uniform(0.0, angle) / np.linalg.norm(rot)
    return PoseParams(rot, rng.normal(size=d) * shift)


def make_context(rng, n, m, d, **cloud_kw):
    fixed = random_cloud(rng, n, d, **cloud_kw)
    moving = random_cloud(rng, m, d, **cloud_kw)
    coeffs = pair_coefficients(fixed, moving)
    return EnergyContext(fixed, moving, coeffs)


class TestGaussianKernel:
    def test_peak_value_3d_identity(self):
        p = np.array([0.5, -1.0, 2.0])
        val = gaussian_kernel(p, p, np.eye(3))
        assert abs(val - 0.06349363593424097) < 1e-15

    def test_peak_value_2d_scaled(self):
        p = np.zeros(2)
        val = gaussian_kernel(p, p, 4.0 * np.eye(2))
        assert abs(val - 0.039788735772973836) < 1e-15

    def test_integrates_to_one_on_grid(self):
        # Riemann-sum normalization check, independent of the formula
        cov = np.array([[1.0, 0.3], [0.3, 0.5]])
        lo, hi, k = -6.0, 6.0, 500
        xs = np.linspace(lo, hi, k, endpoint=False) + (hi - lo) / (2 * k)
        tau = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        vals = gaussian_kernel(tau, np.zeros(2), cov)
        total = vals.sum() * ((hi - lo) / k) ** 2
        assert abs(total - 1.0) < 1e-6

    def test_decays_along_ray(self):
        rng = np.random.default_rng(1)
        cov = random_spd(rng, 3)
        p = rng.normal(size=3)
        u = rng.normal(size=3)
        vals = [gaussian_kernel(p + r * u, p, cov) for r in (0.0, 0.5, 1.0, 2.0)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_batched_matches_scalar(self):
        rng = np.random.default_rng(2)
        cov = random_spd(rng, 3)
        p = rng.normal(size=3)
        taus = rng.normal(size=(10, 3))
        batch = gaussian_kernel(taus, p, cov)
        single = np.array([gaussian_kernel(taus[k], p, cov) for k in range(10)])
        np.testing.assert_allclose(batch, single, rtol=1e-13)


class TestProximityWeight:
    def test_one_at_candidate(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=3)
        assert proximity_weight(p, p, random_spd(rng, 3)) == 1.0

    def test_frozen_anisotropic_value(self):
        val = proximity_weight(
            np.zeros(2), np.array([0.0, 2.0]), np.diag([1.0, 4.0])
        )
        assert abs(val - 0.6065306597126334) < 1e-15

    def test_unnormalized_upper_bound(self):
        rng = np.random.default_rng(4)
        cov = random_spd(rng, 2)
        for _ in range(20):
            w = proximity_weight(rng.normal(size=2), rng.normal(size=2), cov)
            assert 0.0 <= w <= 1.0


class TestPairCoefficients:
    def test_identical_single_points_identity_cov(self):
        cloud = PointCloud(np.zeros((1, 3)), np.eye(3)[None])
        c = pair_coefficients(cloud, cloud)
        assert abs(c.values[0, 0] - 0.008062883608299874) < 1e-17

    def test_frozen_single_pair_value(self):
        fixed = PointCloud(np.zeros((1, 3)), np.eye(3)[None])
        moving = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.eye(3)[None])
        c = pair_coefficients(fixed, moving)
        assert abs(c.values[0, 0] - 0.004890386114128301) < 1e-17

    def test_symmetric_under_cloud_swap(self):
        rng = np.random.default_rng(5)
        a = random_cloud(rng, 4, 3)
        b = random_cloud(rng, 6, 3)
        np.testing.assert_allclose(
            pair_coefficients(a, b).values,
            pair_coefficients(b, a).values.T,
            rtol=1e-13,
        )

    def test_invariant_under_joint_rigid_motion(self):
        rng = np.random.default_rng(6)
        a = random_cloud(rng, 5, 3)
        b = random_cloud(rng, 7, 3)
        T = RigidTransform(
            random_pose(rng, 3).to_transform().rotation, rng.normal(size=3)
        )
        before = pair_coefficients(a, b).values
        after = pair_coefficients(apply_transform(a, T), apply_transform(b, T)).values
        np.testing.assert_allclose(after, before, rtol=1e-10)

    def test_far_pairs_flush_to_exact_zero(self):
        cov = np.eye(3)[None] * 1e-4
        fixed = PointCloud(np.zeros((1, 3)), cov)
        moving = PointCloud(np.array([[100.0, 0.0, 0.0]]), cov)
        c = pair_coefficients(fixed, moving)
        assert c.values[0, 0] == 0.0

    def test_positive_for_overlapping_clouds(self):
        rng = np.random.default_rng(7)
        a = random_cloud(rng, 4, 2)
        b = random_cloud(rng, 5, 2)
        assert (pair_coefficients(a, b).values > 0).all()

    def test_iteration_tag(self):
        rng = np.random.default_rng(8)
        a = random_cloud(rng, 2, 2)
        assert pair_coefficients(a, a, iteration=7).computed_at == 7


class TestObjective:
    def test_frozen_single_pair_value(self):
        fixed = PointCloud(np.zeros((1, 3)), np.eye(3)[None])
        moving = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.eye(3)[None])
        ctx = EnergyContext(fixed, moving, pair_coefficients(fixed, moving))
        val = objective(PoseParams.identity(3), ctx)
        assert abs(val - 0.009780772228256601) < 1e-16

    def test_zero_for_identical_single_point(self):
        p = np.array([[0.7, -0.3, 1.1]])
        cloud = PointCloud(p, np.eye(3)[None] * 0.5)
        ctx = EnergyContext(cloud, cloud, pair_coefficients(cloud, cloud))
        assert abs(objective(PoseParams.identity(3), ctx)) < 1e-16

    def test_zero_at_origin_is_exact(self):
        cloud = PointCloud(np.zeros((1, 3)), np.eye(3)[None])
        ctx = EnergyContext(cloud, cloud, pair_coefficients(cloud, cloud))
        assert objective(PoseParams.identity(3), ctx) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            d = int(rng.integers(2, 4))
            ctx = make_context(rng, 5, 6, d)
            assert objective(random_pose(rng, d), ctx) >= 0.0

    def test_matches_direct_double_sum(self):
        # brute-force re-derivation with explicit per-pair matrix algebra
        rng = np.random.default_rng(10)
        ctx = make_context(rng, 4, 5, 3)
        params = random_pose(rng, 3)
        R = params.to_transform().rotation
        t = params.trans
        X, Y = ctx.fixed.points, ctx.moving_base.points
        total = 0.0
        for i in range(len(ctx.fixed)):
            for j in range(len(ctx.moving_base)):
                d_ij = R @ Y[j] + t - X[i]
                S = np.linalg.inv(ctx.fixed.covariances[i]) + R @ np.linalg.inv(
                    ctx.moving_base.covariances[j]
                ) @ R.T
                total += ctx.coeffs.values[i, j] * d_ij @ S @ d_ij
        np.testing.assert_allclose(
            objective(params, ctx), total, rtol=1e-12
        )

    def test_equals_pointwise_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            d = int(rng.integers(2, 4))
            n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            ctx = make_context(rng, n, m, d)
            params = random_pose(rng, d)
            fast = objective(params, ctx)
            slow = oracle_expected_loss(params, ctx)
            assert abs(fast - slow) <= 1e-10 * max(abs(slow), 1e-300)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(12)
        a = random_cloud(rng, 3, 3)
        b = random_cloud(rng, 4, 3)
        good = pair_coefficients(a, b)
        with pytest.raises(ValueError):
            EnergyContext(b, a, good)


class TestObjectiveGradient:
    @staticmethod
    def finite_difference(params, ctx, h=1e-6):
        vec = params.to_vector()
        out = np.empty_like(vec)
        for k in range(vec.size):
            step = h * max(1.0, abs(vec[k]))
            plus, minus = vec.copy(), vec.copy()
            plus[k] += step
            minus[k] -= step
            dim = ctx.fixed.dim
            out[k] = (
                objective(PoseParams.from_vector(plus, dim), ctx)
                - objective(PoseParams.from_vector(minus, dim), ctx)
            ) / (2 * step)
        return out

    def test_matches_central_differences_3d(self):
        rng = np.random.default_rng(13)
        for _ in range(8):
            ctx = make_context(rng, 6, 7, 3)
            params = random_pose(rng, 3)
            g = objective_gradient(params, ctx)
            fd = self.finite_difference(params, ctx)
            scale = np.abs(fd).max()
            np.testing.assert_allclose(g, fd, atol=1e-7 * max(scale, 1e-12), rtol=1e-6)

    def test_matches_central_differences_2d(self):
        rng = np.random.default_rng(14)
        for _ in range(8):
            ctx = make_context(rng, 5, 4, 2)
            params = random_pose(rng, 2)
            g = objective_gradient(params, ctx)
            fd = self.finite_difference(params, ctx)
            scale = np.abs(fd).max()
            np.testing.assert_allclose(g, fd, atol=1e-7 * max(scale, 1e-12), rtol=1e-6)

    def test_zero_at_minimum_of_symmetric_pair(self):
        cloud = PointCloud(np.zeros((1, 3)), np.eye(3)[None])
        ctx = EnergyContext(cloud, cloud, pair_coefficients(cloud, cloud))
        g = objective_gradient(PoseParams.identity(3), ctx)
        np.testing.assert_allclose(g, np.zeros(6), atol=1e-18)

    def test_gradient_length_matches_params(self):
        rng = np.random.default_rng(15)
        ctx3 = make_context(rng, 3, 3, 3)
        assert objective_gradient(PoseParams.identity(3), ctx3).shape == (6,)
        ctx2 = make_context(rng, 3, 3, 2)
        assert objective_gradient(PoseParams.identity(2), ctx2).shape == (3,)


class TestGridEnergy:
    def test_alignment_scores_higher_than_displacement(self):
        # single-point clouds with covariances sharp relative to the grid
        # (the registration regime); displacing the moving point by one
        # standard deviation must lower the overlap energy
        cov = np.eye(2)[None] * 0.02
        fixed = PointCloud(np.zeros((1, 2)), cov)
        grid = GridSpec(np.array([-1.5, -1.5]), np.array([1.5, 1.5]), (150, 150))
        e_aligned = oracle_energy_grid(fixed, fixed, grid)
        displaced = PointCloud(np.array([[np.sqrt(0.02), 0.0]]), cov)
        e_off = oracle_energy_grid(fixed, displaced, grid)
        assert np.isfinite(e_aligned) and np.isfinite(e_off)
        assert e_aligned > e_off

    def test_energy_improves_as_clouds_approach(self):
        rng = np.random.default_rng(16)
        pts = rng.normal(size=(6, 2))
        cloud = PointCloud(pts, np.stack([np.eye(2) * 0.02] * 6))
        grid = GridSpec(np.array([-4.0, -4.0]), np.array([4.0, 4.0]), (160, 160))
        energies = []
        for shift in (0.5, 0.3, 0.1, 0.05, 0.0):
            moved = PointCloud(pts + np.array([shift, 0.0]), cloud.covariances)
            energies.append(oracle_energy_grid(cloud, moved, grid))
        assert all(b > a for a, b in zip(energies, energies[1:]))
