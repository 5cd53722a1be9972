"""Finite-difference validation of the hand-derived gradient engine."""

import numpy as np
import pytest

from conftest import fd_check, make_intrinsics, make_match_plan, make_random_field, make_ray_plan, make_ring_poses
from graphsurf import autodiff
from graphsurf.autodiff import GradSet, StepPlan, evaluate_step
from graphsurf.losses import LossConfig


@pytest.fixture
def small_instance():
    rng = np.random.default_rng(42)
    fld = make_random_field(rng, res=9, octaves=1)
    poses = make_ring_poses(4, seed=1)
    intr = make_intrinsics()
    return rng, fld, poses, intr


def full_plan(rng, poses, intr):
    rays = make_ray_plan(poses, intr, rng, n_rays=10, k=10)
    matches = make_match_plan(
        poses, intr, rng,
        pairs=[(0, 1, "joint"), (1, 2, "joint"), (0, 2, "pose_j"), (2, 3, "pose_i")],
        k=8,
    )
    return StepPlan(rays=rays, matches=matches)


class TestGradients:
    def test_all_blocks_match_finite_differences(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = full_plan(rng, poses, intr)
        worst, base = fd_check(fld, poses, intr, plan, LossConfig(), rng, n_coords=12)
        for block, err in worst.items():
            assert err <= 1.0, f"{block} gradient off by {err:.2f}x tolerance"
        assert base.parts.color_view > 0 and base.parts.iou > 0

    def test_rays_only_plan(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = StepPlan(rays=make_ray_plan(poses, intr, rng, n_rays=8, k=10))
        worst, _ = fd_check(fld, poses, intr, plan, LossConfig(), rng)
        for block, err in worst.items():
            assert err <= 1.0, f"{block}: {err}"

    def test_matches_only_plan(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = StepPlan(
            matches=make_match_plan(poses, intr, rng, [(0, 1, "joint"), (1, 3, "joint")], k=8)
        )
        worst, _ = fd_check(fld, poses, intr, plan, LossConfig(), rng)
        for block, err in worst.items():
            assert err <= 1.0, f"{block}: {err}"

    def test_constant_loss_zero_gradients(self, small_instance):
        rng, fld, poses, intr = small_instance
        # a ray through empty space with a black target: loss identically 0
        fld.sdf[:] = 1.0
        plan = StepPlan(rays=make_ray_plan(poses, intr, rng, n_rays=4, k=10))
        plan.rays.targets[:] = 0.0
        res = evaluate_step(fld, poses, intr, plan, LossConfig(eikonal_weight=0.0))
        assert res.parts.color_view == 0.0
        np.testing.assert_array_equal(res.grads.color_view, 0.0)
        np.testing.assert_array_equal(res.grads.color_flat, 0.0)
        np.testing.assert_array_equal(res.grads.pose, 0.0)

    def test_gradient_linearity(self, small_instance):
        """Gradients are linear in the loss weights (sum rule).

        The color terms are unweighted and appear in every config, so
        grads(a + b) + grads(0) == grads(a) + grads(b).
        """
        rng, fld, poses, intr = small_instance
        plan = full_plan(rng, poses, intr)
        cfg_zero = LossConfig(eikonal_weight=0.0, iou_weight=0.0, reprojection_weight=0.0)
        cfg_a = LossConfig(eikonal_weight=0.2, iou_weight=0.0, reprojection_weight=0.004)
        cfg_b = LossConfig(eikonal_weight=0.1, iou_weight=0.5, reprojection_weight=0.001)
        cfg_sum = LossConfig(eikonal_weight=0.3, iou_weight=0.5, reprojection_weight=0.005)
        g = {
            name: evaluate_step(fld, poses, intr, plan, cfg).grads
            for name, cfg in (("0", cfg_zero), ("a", cfg_a), ("b", cfg_b), ("s", cfg_sum))
        }
        for block in ("sdf", "color_view", "color_flat", "pose"):
            lhs = getattr(g["s"], block) + getattr(g["0"], block)
            rhs = getattr(g["a"], block) + getattr(g["b"], block)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)
        assert g["s"].sharpness + g["0"].sharpness == pytest.approx(
            g["a"].sharpness + g["b"].sharpness, abs=1e-12
        )


class TestRoutingContracts:
    def test_flat_loss_gradient_is_zero_on_geometry_and_pose(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = StepPlan(rays=make_ray_plan(poses, intr, rng, n_rays=8, k=10))
        # isolate the flat term: make view term vanish by setting targets to
        # the live view render, and disable the other parts
        cfg = LossConfig(eikonal_weight=0.0, iou_weight=0.0, reprojection_weight=0.0)
        probe = evaluate_step(fld, poses, intr, plan, cfg, compute_grads=False)
        del probe
        from graphsurf.field import render_batch

        d_cam = autodiff.pixel_dirs_cam(intr, plan.rays.pixels)
        r_stack = np.stack([p.r for p in poses])
        t_stack = np.stack([p.t for p in poses])
        d = np.einsum("bij,bj->bi", r_stack[plan.rays.pose_idx], d_cam)
        o = t_stack[plan.rays.pose_idx]
        fwd = render_batch(fld, o, d, plan.rays.t)
        plan.rays.targets = fwd["rendered_view"].copy()
        res = evaluate_step(fld, poses, intr, plan, cfg)
        assert res.parts.color_view == pytest.approx(0.0, abs=1e-15)
        assert res.parts.color_flat > 0
        # the flat term's gradient must live in color_flat alone
        np.testing.assert_array_equal(res.grads.sdf, 0.0)
        np.testing.assert_array_equal(res.grads.pose, 0.0)
        assert res.grads.sharpness == 0.0
        assert np.abs(res.grads.color_flat).max() > 0

    def test_freeze_blocks_receive_exact_zero(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = full_plan(rng, poses, intr)
        res = evaluate_step(
            fld, poses, intr, plan, LossConfig(),
            freeze=frozenset({"sdf", "sharpness", "pose"}),
        )
        np.testing.assert_array_equal(res.grads.sdf, 0.0)
        np.testing.assert_array_equal(res.grads.pose, 0.0)
        assert res.grads.sharpness == 0.0
        assert np.abs(res.grads.color_view).max() > 0

    def test_freezing_does_not_change_other_blocks(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = full_plan(rng, poses, intr)
        full = evaluate_step(fld, poses, intr, plan, LossConfig())
        frozen = evaluate_step(
            fld, poses, intr, plan, LossConfig(), freeze=frozenset({"sdf"})
        )
        np.testing.assert_array_equal(full.grads.color_view, frozen.grads.color_view)
        np.testing.assert_array_equal(full.grads.color_flat, frozen.grads.color_flat)
        np.testing.assert_array_equal(full.grads.pose, frozen.grads.pose)
        assert full.grads.sharpness == frozen.grads.sharpness

    def test_pose_only_matches_freeze_inlier_and_field(self, small_instance):
        """Inlier-outlier pairs route gradients only into the outlier pose."""
        rng, fld, poses, intr = small_instance
        plan = StepPlan(
            matches=make_match_plan(poses, intr, rng, [(0, 1, "pose_j"), (2, 3, "pose_i")], k=8)
        )
        res = evaluate_step(fld, poses, intr, plan, LossConfig())
        np.testing.assert_array_equal(res.grads.sdf, 0.0)
        np.testing.assert_array_equal(res.grads.color_view, 0.0)
        np.testing.assert_array_equal(res.grads.color_flat, 0.0)
        assert res.grads.sharpness == 0.0
        # pose 0 is the frozen inlier of pair one; pose 3 of pair two
        np.testing.assert_array_equal(res.grads.pose[0], 0.0)
        np.testing.assert_array_equal(res.grads.pose[3], 0.0)
        assert np.abs(res.grads.pose[1]).max() > 0
        assert np.abs(res.grads.pose[2]).max() > 0

    def test_reloc_mode_routes_flat_into_pose(self, small_instance):
        rng, fld, poses, intr = small_instance
        plan = StepPlan(rays=make_ray_plan(poses, intr, rng, n_rays=8, k=10, pose_ids=[1]))
        res = evaluate_step(
            fld, poses, intr, plan, LossConfig(),
            freeze=frozenset({"sdf", "color_view", "color_flat", "sharpness"}),
            flat_to_pose=True,
        )
        assert np.abs(res.grads.pose[1]).max() > 0
        np.testing.assert_array_equal(res.grads.sdf, 0.0)

    def test_reloc_mode_gradients_match_fd(self, small_instance):
        """Live flat-to-pose gradients (no frozen capture) against FD."""
        rng, fld, poses, intr = small_instance
        plan = StepPlan(rays=make_ray_plan(poses, intr, rng, n_rays=6, k=10, pose_ids=[2]))
        cfg = LossConfig(eikonal_weight=0.0, iou_weight=0.0, reprojection_weight=0.0)
        freeze = frozenset({"sdf", "color_view", "color_flat", "sharpness"})
        res = evaluate_step(fld, poses, intr, plan, cfg, freeze=freeze, flat_to_pose=True)
        h = 1e-6
        from graphsurf.geometry import perturb_pose

        for coord in range(6):
            xi = np.zeros(6)
            xi[coord] = h
            up_poses = list(poses)
            up_poses[2] = perturb_pose(poses[2], xi)
            dn_poses = list(poses)
            dn_poses[2] = perturb_pose(poses[2], -xi)
            up = evaluate_step(fld, up_poses, intr, plan, cfg, compute_grads=False, flat_to_pose=True).total
            dn = evaluate_step(fld, dn_poses, intr, plan, cfg, compute_grads=False, flat_to_pose=True).total
            fd = (up - dn) / (2 * h)
            g = res.grads.pose[2, coord]
            assert abs(g - fd) <= 1e-6 + 1e-3 * max(abs(g), abs(fd)), (coord, g, fd)
