import numpy as np
import pytest

from graphsurf.geometry import BehindCamera, Intrinsics, backproject, identity_pose, look_at
from graphsurf.losses import (
    AllZeroWeights,
    DegenerateMixture,
    LossConfig,
    LossParts,
    RayMoG,
    color_loss,
    eikonal_loss,
    huber,
    iou_loss,
    iou_loss_with_grads,
    max_weight_depth,
    ray_mog,
    reprojection_loss,
    total_loss,
)


def mog_density(mog: RayMoG, pts: np.ndarray) -> np.ndarray:
    out = np.zeros(pts.shape[0])
    for mu, sigma, w in zip(mog.means, mog.sigmas, mog.weights):
        sq = ((pts - mu) ** 2).sum(axis=1)
        out += w * (2 * np.pi * sigma**2) ** -1.5 * np.exp(-0.5 * sq / sigma**2)
    return out


def quadrature_iou_oracle(a: RayMoG, b: RayMoG, n=96) -> float:
    """Midpoint-rule quadrature of the density products (spectrally accurate)."""
    all_means = np.concatenate([a.means, b.means])
    sig_max = max(a.sigmas.max(), b.sigmas.max())
    lo = all_means.min(axis=0) - 8 * sig_max
    hi = all_means.max(axis=0) + 8 * sig_max
    axes = [lo[k] + (hi[k] - lo[k]) * (np.arange(n) + 0.5) / n for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    dv = np.prod((hi - lo) / n)
    rho_a = mog_density(a, pts)
    rho_b = mog_density(b, pts)
    inter = (rho_a * rho_b).sum() * dv
    va = (rho_a**2).sum() * dv
    vb = (rho_b**2).sum() * dv
    return 1.0 - inter / (va + vb - inter)


class TestColorLoss:
    def test_equal_is_zero(self):
        x = np.random.default_rng(0).uniform(size=(10, 3))
        assert color_loss(x, x) == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(1).uniform(0.0, 0.8, size=(10, 3))
        assert color_loss(x + 0.1, x) == pytest.approx(0.1, abs=1e-12)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(6, 3)), rng.uniform(size=(6, 3))
        direct = sum(abs(a[i, c] - b[i, c]) for i in range(6) for c in range(3)) / 18
        assert color_loss(a, b) == pytest.approx(direct, abs=1e-12)


class TestEikonal:
    def test_unit_gradients_zero(self):
        g = np.eye(3)
        assert eikonal_loss(g) == 0.0

    def test_norm_two_gives_one(self):
        assert eikonal_loss(np.array([[2.0, 0, 0]])) == pytest.approx(1.0, abs=1e-15)

    def test_analytic_sphere_sdf(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1, 1, size=(500, 3))
        pts = pts[np.linalg.norm(pts, axis=1) > 0.05]
        grads = pts / np.linalg.norm(pts, axis=1, keepdims=True)
        assert eikonal_loss(grads) < 1e-20

    def test_rotation_invariant(self):
        rng = np.random.default_rng(4)
        g = rng.normal(size=(50, 3))
        theta = 0.7
        rot = np.array(
            [
                [np.cos(theta), -np.sin(theta), 0],
                [np.sin(theta), np.cos(theta), 0],
                [0, 0, 1],
            ]
        )
        assert eikonal_loss(g @ rot.T) == pytest.approx(eikonal_loss(g), rel=1e-12)


class TestIouLoss:
    def test_identical_mixture_zero(self):
        rng = np.random.default_rng(5)
        m = ray_mog(rng.normal(size=(4, 3)), np.full(4, 0.2), rng.uniform(0.1, 1, 4))
        assert iou_loss(m, m) == pytest.approx(0.0, abs=1e-9)

    def test_far_apart_is_one(self):
        a = ray_mog(np.zeros((1, 3)), [0.1], [1.0])
        b = ray_mog(np.full((1, 3), 10.0), [0.1], [1.0])  # 100 sigma away
        assert iou_loss(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            a = ray_mog(
                rng.normal(size=(2, 3)) * 0.2, rng.uniform(0.15, 0.3, 2), rng.uniform(0.2, 1, 2)
            )
            b = ray_mog(
                rng.normal(size=(2, 3)) * 0.2, rng.uniform(0.15, 0.3, 2), rng.uniform(0.2, 1, 2)
            )
            assert iou_loss(a, b) == pytest.approx(quadrature_iou_oracle(a, b), abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = ray_mog(rng.normal(size=(3, 3)), np.full(3, 0.25), rng.uniform(0.1, 1, 3))
        b = ray_mog(rng.normal(size=(3, 3)), np.full(3, 0.2), rng.uniform(0.1, 1, 3))
        assert iou_loss(a, b) == pytest.approx(iou_loss(b, a), rel=1e-12)

    def test_in_unit_interval_and_positive_when_different(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = ray_mog(rng.normal(size=(3, 3)), rng.uniform(0.1, 0.4, 3), rng.uniform(0.1, 1, 3))
            b = ray_mog(rng.normal(size=(3, 3)), rng.uniform(0.1, 0.4, 3), rng.uniform(0.1, 1, 3))
            val = iou_loss(a, b)
            assert 0.0 < val <= 1.0

    def test_degenerate_mixture(self):
        with pytest.raises(DegenerateMixture):
            ray_mog(np.zeros((2, 3)), [0.1, 0.1], [0.0, 0.0])

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        a = ray_mog(rng.normal(size=(3, 3)) * 0.3, np.full(3, 0.2), rng.uniform(0.2, 1, 3))
        b = ray_mog(rng.normal(size=(3, 3)) * 0.3, np.full(3, 0.25), rng.uniform(0.2, 1, 3))
        _, g = iou_loss_with_grads(a, b)
        h = 1e-7
        for comp in range(3):
            for axis in range(3):
                ap = RayMoG(a.means.copy(), a.sigmas, a.weights)
                am = RayMoG(a.means.copy(), a.sigmas, a.weights)
                ap.means[comp, axis] += h
                am.means[comp, axis] -= h
                fd = (iou_loss(ap, b) - iou_loss(am, b)) / (2 * h)
                assert g["d_means_a"][comp, axis] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            wp = RayMoG(b.means, b.sigmas, b.weights.copy())
            wm = RayMoG(b.means, b.sigmas, b.weights.copy())
            wp.weights[comp] += h
            wm.weights[comp] -= h
            fd = (iou_loss(a, wp) - iou_loss(a, wm)) / (2 * h)
            assert g["d_weights_b"][comp] == pytest.approx(fd, rel=1e-5, abs=1e-9)


class TestMaxWeightDepth:
    def test_basic(self):
        assert max_weight_depth([0.1, 0.9, 0.2], [1.0, 2.0, 3.0]) == 2.0

    def test_tie_breaks_nearer(self):
        assert max_weight_depth([0.5, 0.1, 0.5], [1.0, 2.0, 3.0]) == 1.0

    def test_all_zero(self):
        with pytest.raises(AllZeroWeights):
            max_weight_depth([0.0, 0.0], [1.0, 2.0])


class TestReprojection:
    def test_exact_geometry_zero(self):
        intr = Intrinsics(120.0, 120.0, 48.0, 48.0, 96, 96)
        pose_i = look_at(np.array([1.8, 0, 0.2]), np.zeros(3), np.array([0, 0, 1.0]))
        pose_j = look_at(np.array([1.5, 1.0, -0.1]), np.zeros(3), np.array([0, 0, 1.0]))
        kp_i = np.array([40.0, 52.0])
        depth = 1.55
        x = backproject(pose_i, intr, kp_i, depth)
        from graphsurf.geometry import project

        kp_j = project(pose_j, intr, x)
        assert reprojection_loss(kp_i, depth, pose_i, pose_j, intr, kp_j, 1.0) < 1e-6

    def test_huber_quadratic_branch(self):
        delta = 2.0
        r = delta / 2
        assert huber(r, delta) == pytest.approx(r * r / 2, abs=1e-15)

    def test_huber_linear_branch(self):
        delta = 0.7
        r = 10 * delta
        assert huber(r, delta) == pytest.approx(delta * (r - delta / 2), abs=1e-12)

    def test_positive_under_perturbation(self):
        intr = Intrinsics(120.0, 120.0, 48.0, 48.0, 96, 96)
        pose_i = look_at(np.array([1.8, 0, 0.2]), np.zeros(3), np.array([0, 0, 1.0]))
        pose_j = look_at(np.array([1.2, 1.2, 0.0]), np.zeros(3), np.array([0, 0, 1.0]))
        kp_i = np.array([40.0, 52.0])
        depth = 1.6
        from graphsurf.geometry import project

        kp_j = project(pose_j, intr, backproject(pose_i, intr, kp_i, depth))
        assert reprojection_loss(kp_i, depth, pose_i, pose_j, intr, kp_j + [1e-5, 0], 1.0) > 0

    def test_behind_camera_propagates(self):
        intr = Intrinsics(120.0, 120.0, 48.0, 48.0, 96, 96)
        pose_i = identity_pose()
        pose_j = look_at(np.array([0.0, 0, 10.0]), np.array([0, 0, 20.0]), np.array([0, 1.0, 0]))
        with pytest.raises(BehindCamera):
            reprojection_loss(np.array([48.0, 48.0]), 1.0, pose_i, pose_j, intr, np.array([0.0, 0]), 1.0)


class TestTotalLoss:
    def test_zero_weights_reduce_to_color_terms(self):
        parts = LossParts(0.3, 0.2, 5.0, 7.0, 9.0)
        cfg = LossConfig(eikonal_weight=0, iou_weight=0, reprojection_weight=0)
        assert total_loss(parts, cfg) == pytest.approx(0.5, abs=1e-15)

    def test_default_weights_hand_computed(self):
        parts = LossParts(0.3, 0.2, 5.0, 7.0, 9.0)
        cfg = LossConfig()  # 0.1, 0.2, 0.001
        expected = 0.3 + 0.2 + 0.1 * 5.0 + 0.2 * 7.0 + 0.001 * 9.0
        assert total_loss(parts, cfg) == pytest.approx(expected, abs=1e-15)
