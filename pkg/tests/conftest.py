"""Shared builders and the finite-difference gradient harness."""

import numpy as np
import pytest

from graphsurf import autodiff
from graphsurf.field import Field, FieldConfig, ray_cube_intersect, stratified_depths
from graphsurf.geometry import Intrinsics, Pose, look_at, perturb_pose


def make_intrinsics(size=64, focal=80.0) -> Intrinsics:
    return Intrinsics(focal, focal, size / 2.0, size / 2.0, size, size)


def make_ring_poses(n, radius=1.7, seed=0) -> list[Pose]:
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n):
        az = 2 * np.pi * i / n
        elev = rng.uniform(-0.15, 0.45)
        eye = radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)]
        )
        poses.append(look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0])))
    return poses


def make_random_field(rng, res=10, octaves=1, sharpness=25.0) -> Field:
    f = Field.create(FieldConfig(res=res, dir_octaves=octaves, init_sharpness=sharpness))
    f.sdf += 0.05 * rng.normal(size=f.sdf.shape)
    f.color_view[..., :3] = rng.uniform(0.3, 0.7, size=f.color_view[..., :3].shape)
    f.color_view[..., 3:] = 0.02 * rng.normal(size=f.color_view[..., 3:].shape)
    f.color_flat[:] = rng.uniform(0.3, 0.7, size=f.color_flat.shape)
    return f


def make_ray_plan(poses, intr, rng, n_rays=12, k=12, pose_ids=None) -> autodiff.RayBatchPlan:
    if pose_ids is None:
        pose_ids = rng.integers(0, len(poses), size=n_rays)
    pose_idx, pixels = [], []
    while len(pixels) < n_rays:
        pid = int(pose_ids[len(pixels) % len(pose_ids)])
        px = rng.uniform([intr.width * 0.3, intr.height * 0.3],
                         [intr.width * 0.7, intr.height * 0.7])
        d_cam = autodiff.pixel_dirs_cam(intr, px[None])
        d = d_cam @ poses[pid].r.T
        _, _, hit = ray_cube_intersect(poses[pid].t[None], d)
        if hit[0]:
            pose_idx.append(pid)
            pixels.append(px)
    pixels = np.array(pixels)
    pose_idx = np.array(pose_idx, dtype=int)
    t_near = np.zeros(n_rays)
    t_far = np.zeros(n_rays)
    for n, (pid, px) in enumerate(zip(pose_idx, pixels)):
        d_cam = autodiff.pixel_dirs_cam(intr, px[None])
        d = d_cam @ poses[pid].r.T
        tn, tf, _ = ray_cube_intersect(poses[pid].t[None], d)
        t_near[n], t_far[n] = tn[0], tf[0]
    t = stratified_depths(t_near, t_far, k, rng)
    targets = rng.uniform(0.2, 0.8, size=(n_rays, 3))
    return autodiff.RayBatchPlan(pose_idx=pose_idx, pixels=pixels, targets=targets, t=t)


def make_match_plan(poses, intr, rng, pairs, k=10) -> autodiff.MatchPlan:
    """pairs: list of (i, j, mode) with mode in joint|pose_i|pose_j."""
    rows = {key: [] for key in (
        "pose_i", "pose_j", "kp_i", "kp_j", "t_i", "t_j",
        "spacing_i", "spacing_j", "opt_i", "opt_j", "field_on")}
    for (i, j, mode) in pairs:
        while True:
            kp_i = rng.uniform([intr.width * 0.35, intr.height * 0.35],
                               [intr.width * 0.65, intr.height * 0.65])
            kp_j = rng.uniform([intr.width * 0.35, intr.height * 0.35],
                               [intr.width * 0.65, intr.height * 0.65])
            ok, ts, spacings = True, [], []
            for pid, kp in ((i, kp_i), (j, kp_j)):
                d_cam = autodiff.pixel_dirs_cam(intr, kp[None])
                d = d_cam @ poses[pid].r.T
                tn, tf, hit = ray_cube_intersect(poses[pid].t[None], d)
                if not hit[0]:
                    ok = False
                    break
                ts.append(stratified_depths(tn, tf, k, rng)[0])
                spacings.append((tf[0] - tn[0]) / k)
            if ok:
                break
        rows["pose_i"].append(i)
        rows["pose_j"].append(j)
        rows["kp_i"].append(kp_i)
        rows["kp_j"].append(kp_j)
        rows["t_i"].append(ts[0])
        rows["t_j"].append(ts[1])
        rows["spacing_i"].append(spacings[0])
        rows["spacing_j"].append(spacings[1])
        rows["opt_i"].append(mode in ("joint", "pose_i"))
        rows["opt_j"].append(mode in ("joint", "pose_j"))
        rows["field_on"].append(mode == "joint")
    return autodiff.MatchPlan(
        pose_i=np.array(rows["pose_i"], dtype=int),
        pose_j=np.array(rows["pose_j"], dtype=int),
        kp_i=np.array(rows["kp_i"]),
        kp_j=np.array(rows["kp_j"]),
        t_i=np.array(rows["t_i"]),
        t_j=np.array(rows["t_j"]),
        spacing_i=np.array(rows["spacing_i"]),
        spacing_j=np.array(rows["spacing_j"]),
        opt_i=np.array(rows["opt_i"], dtype=bool),
        opt_j=np.array(rows["opt_j"], dtype=bool),
        field_on=np.array(rows["field_on"], dtype=bool),
    )


def fd_check(
    fld,
    poses,
    intr,
    plan,
    cfg,
    rng,
    blocks=("sdf", "color_view", "color_flat", "sharpness", "pose"),
    n_coords=8,
    h=1e-5,
    rtol=1e-3,
    atol=1e-6,
    freeze=frozenset(),
):
    """Central finite differences against the analytic gradients.

    Returns {block: worst error ratio}; a ratio <= 1 means within tolerance
    (|analytic - fd| <= atol + rtol * max(|analytic|, |fd|)).
    """
    base = autodiff.evaluate_step(fld, poses, intr, plan, cfg, freeze=freeze)
    cap = base.capture

    def value(field2, poses2):
        return autodiff.evaluate_step(
            field2, poses2, intr, plan, cfg, frozen=cap, compute_grads=False, freeze=freeze
        ).total

    # base-point consistency: frozen evaluation reproduces the live value
    assert value(fld, poses) == pytest.approx(base.total, rel=1e-12)

    worst = {}
    for block in blocks:
        errs = []
        if block in ("sdf", "color_view", "color_flat"):
            arr = getattr(fld, block)
            grad = getattr(base.grads, block)
            flat_g = np.abs(grad).reshape(-1)
            n_top = min(n_coords // 2, arr.size)
            top = np.argsort(flat_g)[-n_top:] if flat_g.max() > 0 else []
            rand = rng.choice(arr.size, size=n_coords - len(top), replace=False)
            for idx in list(top) + list(rand):
                f2 = fld.copy()
                pert = f2.grid_blocks()[block].reshape(-1)
                pert[idx] += h
                up = value(f2, poses)
                pert[idx] -= 2 * h
                down = value(f2, poses)
                fd = (up - down) / (2 * h)
                g = grad.reshape(-1)[idx]
                errs.append(abs(g - fd) / (atol + rtol * max(abs(g), abs(fd))))
        elif block == "sharpness":
            f2 = fld.copy()
            f2.sharpness = fld.sharpness + h
            up = value(f2, poses)
            f2.sharpness = fld.sharpness - h
            down = value(f2, poses)
            fd = (up - down) / (2 * h)
            g = base.grads.sharpness
            errs.append(abs(g - fd) / (atol + rtol * max(abs(g), abs(fd))))
        elif block == "pose":
            for pid in range(len(poses)):
                for coord in range(6):
                    xi = np.zeros(6)
                    xi[coord] = h
                    poses_up = list(poses)
                    poses_up[pid] = perturb_pose(poses[pid], xi)
                    poses_dn = list(poses)
                    poses_dn[pid] = perturb_pose(poses[pid], -xi)
                    fd = (value(fld, poses_up) - value(fld, poses_dn)) / (2 * h)
                    g = base.grads.pose[pid, coord]
                    errs.append(abs(g - fd) / (atol + rtol * max(abs(g), abs(fd))))
        worst[block] = max(errs) if errs else 0.0
    return worst, base
