"""Exact gradients of the training loss by hand-derived adjoints.

A training step is evaluated in two conceptual phases:

1. a planning phase (non-differentiated) fixes the batch: which rays, which
   matches, the per-ray sample depths, and a few captured constants;
2. a differentiable evaluation maps (field parameters, poses) -> loss.

The captured constants make routing rules well-defined as mathematics and
not just as autodiff tricks. Specifically, the evaluated function holds
fixed:

- the sample depths of every planned ray,
- the flat-head (view-independent) rendering weights and sample positions,
  realizing the detachment rule: the flat color loss is a function of the
  flat color grid alone,
- the per-match depths used by the re-projection term (the max-weight depth
  is a non-differentiable selection),
- the Eikonal sample positions,
- validity masks (behind-camera matches, zero-weight rays).

``evaluate_step`` runs in two modes. With ``frozen=None`` it computes the
constants from its own forward pass (training: one pass, gradients routed).
With ``frozen`` set to a capture from a previous call it re-uses them, which
is what makes central finite differences of the returned total match the
returned analytic gradients coordinate-by-coordinate.

Pose gradients are w.r.t. a left-multiplied tangent at the current pose,
d/d(eps) of loss(exp(eps) * pose) at eps = 0, with tangent layout
[omega, v]. For a quantity a(eps) = R(eps) @ a_cam the adjoint is
d(omega) += a_world x g_a, and for the origin o = t(eps) it is
d(omega) += o x g_o, d(v) += g_o.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import kernels
from .field import Field, dir_feature_count, dir_features_jacobian, render_batch
from .geometry import Intrinsics, Pose
from .losses import LossConfig, LossParts, RayMoG, iou_loss_with_grads, total_loss


@dataclass
class GradSet:
    """Gradient buffers, one per parameter block (same shapes as the params)."""

    sdf: np.ndarray
    color_view: np.ndarray
    color_flat: np.ndarray
    sharpness: float
    pose: np.ndarray  # (P, 6), [omega, v] per pose

    @classmethod
    def zeros(cls, f: Field, n_poses: int) -> "GradSet":
        return cls(
            np.zeros_like(f.sdf),
            np.zeros_like(f.color_view),
            np.zeros_like(f.color_flat),
            0.0,
            np.zeros((n_poses, 6)),
        )


@dataclass
class RayBatchPlan:
    """Color rays; all rays intersect the cube by construction."""

    pose_idx: np.ndarray  # (B,)
    pixels: np.ndarray  # (B, 2)
    targets: np.ndarray  # (B, 3)
    t: np.ndarray  # (B, K)


@dataclass
class MatchPlan:
    """Match terms; modes encode the pair policy routing.

    opt_i / opt_j: whether the pose of side i / j receives gradients.
    field_on:      whether the match routes gradients into field blocks
                   (False for inlier-outlier pairs, whose backbone is frozen).
    """

    pose_i: np.ndarray  # (M,)
    pose_j: np.ndarray  # (M,)
    kp_i: np.ndarray  # (M, 2)
    kp_j: np.ndarray  # (M, 2)
    t_i: np.ndarray  # (M, K)
    t_j: np.ndarray  # (M, K)
    spacing_i: np.ndarray  # (M,) sample bin width, sets the MoG sigmas
    spacing_j: np.ndarray  # (M,)
    opt_i: np.ndarray  # (M,) bool
    opt_j: np.ndarray  # (M,) bool
    field_on: np.ndarray  # (M,) bool


@dataclass
class StepPlan:
    rays: RayBatchPlan | None = None
    matches: MatchPlan | None = None


@dataclass
class FrozenCapture:
    """Constants captured at the base point; see module docstring."""

    flat_weights: np.ndarray | None = None
    flat_points: np.ndarray | None = None
    eik_points: np.ndarray | None = None
    depth_i: np.ndarray | None = None
    depth_j: np.ndarray | None = None
    rep_valid_ij: np.ndarray | None = None
    rep_valid_ji: np.ndarray | None = None
    iou_valid: np.ndarray | None = None
    match_weights: np.ndarray | None = None  # used by matches with a frozen backbone
    pose_r: np.ndarray | None = None  # base pose stacks; frozen match sides read these
    pose_t: np.ndarray | None = None


@dataclass
class StepResult:
    parts: LossParts
    total: float
    grads: GradSet | None
    capture: FrozenCapture
    diagnostics: dict = dataclass_field(default_factory=dict)


ALL_BLOCKS = frozenset({"sdf", "color_view", "color_flat", "sharpness", "pose"})


def pixel_dirs_cam(intr: Intrinsics, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame direction through each pixel, (B, 3)."""
    d = np.stack(
        [
            (pixels[:, 0] - intr.cx) / intr.fx,
            (pixels[:, 1] - intr.cy) / intr.fy,
            np.ones(len(pixels)),
        ],
        axis=1,
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _neus_backward(fwd: dict, g_weights: np.ndarray, sharpness: float):
    """Adjoint of weights = cumprod-alpha rendering.

    g_weights is dL/dweights, shape (B, K-1). Returns (df, d_sf) where df is
    dL/d(sdf values) (B, K) and d_sf is dL/d(sharpness * f) per sample, from
    which dL/d(sharpness) = sum(d_sf * f) with any per-ray masking applied
    by the caller.
    """
    alpha = fwd["alpha"]
    trans = fwd["trans"]
    ratio = fwd["ratio"]
    phi = fwd["phi"]
    gww = g_weights * fwd["weights"]
    suffix_inclusive = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1]
    suffix = suffix_inclusive - gww  # sum over later samples only
    d_alpha = g_weights * trans - suffix / (1.0 - alpha)
    d_ratio = np.where(1.0 - ratio > 0.0, -d_alpha, 0.0)
    d_phi = np.zeros_like(phi)
    d_phi[:, 1:] += d_ratio / phi[:, :-1]
    d_phi[:, :-1] -= d_ratio * ratio / phi[:, :-1]
    d_sf = d_phi * phi * (1.0 - phi)
    df = sharpness * d_sf
    return df, d_sf


def _pose_pullback(gpose, pose_idx, origins, dirs, g_o, g_d, mask):
    """Accumulate origin/direction adjoints into tangent gradients."""
    m = mask[:, None]
    np.add.at(gpose[:, :3], pose_idx, (np.cross(origins, g_o) + np.cross(dirs, g_d)) * m)
    np.add.at(gpose[:, 3:], pose_idx, g_o * m)


def evaluate_step(
    f: Field,
    poses: list[Pose],
    intr: Intrinsics,
    plan: StepPlan,
    cfg: LossConfig,
    frozen: FrozenCapture | None = None,
    compute_grads: bool = True,
    freeze: frozenset = frozenset(),
    flat_to_pose: bool = False,
) -> StepResult:
    """Evaluate the total loss, its parts, and (optionally) all gradients.

    freeze names blocks that must receive exactly zero gradient.
    flat_to_pose enables the re-localization mode, where the flat color loss
    is evaluated live and differentiated into the pose (and only the pose);
    it is mutually exclusive with a frozen capture.
    """
    unknown = freeze - ALL_BLOCKS
    if unknown:
        raise ValueError(f"unknown blocks in freeze: {sorted(unknown)}")
    if flat_to_pose and frozen is not None:
        raise ValueError("flat_to_pose requires live evaluation")

    to = {name: (name not in freeze) and compute_grads for name in ALL_BLOCKS}
    r_stack = np.stack([p.r for p in poses])
    t_stack = np.stack([p.t for p in poses])
    grads = GradSet.zeros(f, len(poses)) if compute_grads else None
    capture = FrozenCapture()
    parts = LossParts()
    diag = {"rep_skipped": 0, "iou_skipped": 0}
    n_feat = dir_feature_count(f.dir_octaves)

    # ---- color rays ------------------------------------------------------
    if plan.rays is not None and len(plan.rays.pose_idx) > 0:
        rp = plan.rays
        b, k = rp.t.shape
        d_cam = pixel_dirs_cam(intr, rp.pixels)
        o = t_stack[rp.pose_idx]
        d = np.einsum("bij,bj->bi", r_stack[rp.pose_idx], d_cam)
        fwd = render_batch(f, o, d, rp.t)
        pc = fwd["p"][:, : k - 1].reshape(-1, 3)

        resid_view = fwd["rendered_view"] - rp.targets
        parts.color_view = float(np.mean(np.abs(resid_view)))

        if frozen is None:
            flat_w = fwd["weights"]
            flat_pts = pc
            raw_flat = fwd["raw_flat"]
            capture.flat_weights = flat_w.copy()
            capture.flat_points = flat_pts.copy()
            capture.eik_points = fwd["p"].reshape(-1, 3).copy()
            eik_pts = capture.eik_points
        else:
            flat_w = frozen.flat_weights
            flat_pts = frozen.flat_points
            raw_flat = kernels.tri_gather_vec(f.color_flat, flat_pts)
            eik_pts = frozen.eik_points
        col_flat = np.clip(raw_flat, 0.0, 1.0).reshape(b, k - 1, 3)
        rendered_flat = np.einsum("bk,bkc->bc", flat_w, col_flat)
        resid_flat = rendered_flat - rp.targets
        parts.color_flat = float(np.mean(np.abs(resid_flat)))
        diag["sq_err_view"] = np.mean(resid_view**2, axis=1)
        diag["sq_err_flat"] = np.mean(resid_flat**2, axis=1)

        vals_e, grads_e = kernels.tri_gather_grad(f.sdf, eik_pts)
        norms = np.linalg.norm(grads_e, axis=1)
        parts.eikonal = float(np.mean((norms - 1.0) ** 2))

        if compute_grads:
            g_cv = np.sign(resid_view) / resid_view.size
            g_cf = np.sign(resid_flat) / resid_flat.size

            # view head: color gather adjoint (grid, position, direction)
            g_w = np.einsum("bc,bkc->bk", g_cv, fwd["col_view"])
            g_col_view = fwd["weights"][..., None] * g_cv[:, None, :]
            mask_v = ((fwd["raw_view"] > 0.0) & (fwd["raw_view"] < 1.0)).astype(float)
            g_raw_v = g_col_view.reshape(-1, 3) * mask_v
            gamma_rep = np.repeat(fwd["gamma"], k - 1, axis=0)
            up_feats = np.concatenate(
                [g_raw_v, (g_raw_v[:, :, None] * gamma_rep[:, None, :]).reshape(-1, 3 * n_feat)],
                axis=1,
            )
            if to["color_view"]:
                kernels.tri_vjp_grid_vec(grads.color_view, pc, up_feats)
            g_p = np.zeros((b, k, 3))
            if to["pose"]:
                g_p[:, : k - 1] += kernels.tri_vjp_pos_vec(f.color_view, pc, up_feats).reshape(
                    b, k - 1, 3
                )
                g_gamma = np.einsum("nc,ncf->nf", g_raw_v, fwd["coef"]).reshape(b, k - 1, n_feat).sum(axis=1)
                g_d_dir = np.einsum("nf,nfk->nk", g_gamma, dir_features_jacobian(d, f.dir_octaves))
            else:
                g_d_dir = np.zeros((b, 3))

            # flat head: grid always (unless frozen out); pose only in reloc mode
            mask_f = ((raw_flat > 0.0) & (raw_flat < 1.0)).astype(float)
            g_raw_f = (flat_w[..., None] * g_cf[:, None, :]).reshape(-1, 3) * mask_f
            if to["color_flat"]:
                kernels.tri_vjp_grid_vec(grads.color_flat, flat_pts, g_raw_f)
            if flat_to_pose:
                g_w = g_w + np.einsum("bc,bkc->bk", g_cf, col_flat)
                if to["pose"]:
                    g_p[:, : k - 1] += kernels.tri_vjp_pos_vec(
                        f.color_flat, flat_pts, g_raw_f
                    ).reshape(b, k - 1, 3)

            df, d_sf = _neus_backward(fwd, g_w, f.sharpness)
            if to["sdf"]:
                kernels.tri_vjp_grid(grads.sdf, fwd["p"].reshape(-1, 3), df.reshape(-1))
            if to["sharpness"]:
                grads.sharpness += float(np.sum(d_sf * fwd["f"]))
            if to["pose"]:
                _, sdf_sp = kernels.tri_gather_grad(f.sdf, fwd["p"].reshape(-1, 3))
                g_p += (df.reshape(-1, 1) * sdf_sp).reshape(b, k, 3)
                g_o = g_p.sum(axis=1)
                g_d = (rp.t[..., None] * g_p).sum(axis=1) + g_d_dir
                _pose_pullback(grads.pose, rp.pose_idx, o, d, g_o, g_d, np.ones(b))

            # Eikonal at frozen points: field-only path
            if to["sdf"] and cfg.eikonal_weight != 0.0:
                safe = np.maximum(norms, 1e-300)
                g_ge = (
                    (2.0 * cfg.eikonal_weight / norms.size)
                    * ((norms - 1.0) / safe)[:, None]
                    * grads_e
                )
                kernels.tri_vjp_grid_from_spatial(grads.sdf, eik_pts, g_ge)

    # ---- match terms -----------------------------------------------------
    mp = plan.matches
    if mp is not None and len(mp.pose_i) > 0:
        m, k2 = mp.t_i.shape
        pose_all = np.concatenate([mp.pose_i, mp.pose_j])
        kp_all = np.concatenate([mp.kp_i, mp.kp_j], axis=0)
        t_all = np.concatenate([mp.t_i, mp.t_j], axis=0)
        opt_all_mask = np.concatenate([mp.opt_i, mp.opt_j])
        d_cam = pixel_dirs_cam(intr, kp_all)
        if frozen is None:
            capture.pose_r = r_stack.copy()
            capture.pose_t = t_stack.copy()
            base_r, base_t = capture.pose_r, capture.pose_t
        else:
            base_r, base_t = frozen.pose_r, frozen.pose_t
        # Pair-policy freezing is part of the evaluated function: a match
        # side whose pose is not optimized contributes through the base
        # (captured) pose, so its live pose is genuinely not an input.
        r_eff = np.where(opt_all_mask[:, None, None], r_stack[pose_all], base_r[pose_all])
        t_eff = np.where(opt_all_mask[:, None], t_stack[pose_all], base_t[pose_all])
        o_all = t_eff
        d_all = np.einsum("bij,bj->bi", r_eff, d_cam)
        fwd = render_batch(f, o_all, d_all, t_all)
        w_all = fwd["weights"]
        mu_all = fwd["p"][:, : k2 - 1]

        if frozen is None:
            wsum = w_all.sum(axis=1)
            has_w = wsum > 0.0
            idx_max = np.argmax(w_all, axis=1)
            depth_all = np.take_along_axis(t_all, idx_max[:, None], axis=1)[:, 0]
            capture.depth_i = np.where(has_w[:m], depth_all[:m], -1.0)
            capture.depth_j = np.where(has_w[m:], depth_all[m:], -1.0)
            capture.iou_valid = has_w[:m] & has_w[m:]
            capture.match_weights = w_all.copy()
            depth_i, depth_j, iou_valid = capture.depth_i, capture.depth_j, capture.iou_valid
            frozen_w = capture.match_weights
        else:
            depth_i, depth_j, iou_valid = frozen.depth_i, frozen.depth_j, frozen.iou_valid
            frozen_w = frozen.match_weights

        g_w_all = np.zeros_like(w_all) if compute_grads else None
        g_mu_all = np.zeros_like(mu_all) if compute_grads else None

        # Overlap loss, one matched ray pair at a time. Matches with a frozen
        # backbone (inlier-outlier pairs) consume the captured weights, so
        # the term is a function of the poses alone; the rest use live
        # weights and route gradients into the field.
        iou_sum = 0.0
        sig_i = cfg.sigma_scale * mp.spacing_i
        sig_j = cfg.sigma_scale * mp.spacing_j
        for mi in range(m):
            if not iou_valid[mi]:
                diag["iou_skipped"] += 1
                continue
            live = bool(mp.field_on[mi])
            wi = w_all[mi] if live else frozen_w[mi]
            wj = w_all[m + mi] if live else frozen_w[m + mi]
            si, sj = wi.sum(), wj.sum()
            if si <= 0.0 or sj <= 0.0:
                diag["iou_skipped"] += 1
                continue
            mog_i = RayMoG(mu_all[mi], np.full(k2 - 1, sig_i[mi]), wi / si)
            mog_j = RayMoG(mu_all[m + mi], np.full(k2 - 1, sig_j[mi]), wj / sj)
            loss_mi, g = iou_loss_with_grads(mog_i, mog_j, need_grads=compute_grads)
            iou_sum += loss_mi
            if compute_grads:
                seed = cfg.iou_weight / m
                if live:
                    for side, idx, mog, wsump in (
                        ("a", mi, mog_i, si),
                        ("b", m + mi, mog_j, sj),
                    ):
                        gw_hat = g[f"d_weights_{side}"]
                        g_w_all[idx] += seed * (gw_hat - gw_hat @ mog.weights) / wsump
                        g_mu_all[idx] += seed * g[f"d_means_{side}"]
                else:
                    g_mu_all[mi] += seed * g["d_means_a"]
                    g_mu_all[m + mi] += seed * g["d_means_b"]
        parts.iou = iou_sum / m

        # re-projection, both directions averaged per match
        rep_sum = 0.0
        if frozen is None:
            capture.rep_valid_ij = np.zeros(m, dtype=bool)
            capture.rep_valid_ji = np.zeros(m, dtype=bool)
        for direction in ("ij", "ji"):
            if direction == "ij":
                src, dst = slice(0, m), slice(m, 2 * m)
                depths, kp_dst = depth_i, mp.kp_j
                opt_src, opt_dst = mp.opt_i, mp.opt_j
            else:
                src, dst = slice(m, 2 * m), slice(0, m)
                depths, kp_dst = depth_j, mp.kp_i
                opt_src, opt_dst = mp.opt_j, mp.opt_i
            pose_src = pose_all[src]
            pose_dst = pose_all[dst]
            x = o_all[src] + depths[:, None] * d_all[src]
            r_dst = r_eff[dst]
            q = np.einsum("mba,mb->ma", r_dst, x - o_all[dst])
            valid = (depths > 0.0) & (q[:, 2] > 1e-8)
            if frozen is None:
                if direction == "ij":
                    capture.rep_valid_ij = valid.copy()
                else:
                    capture.rep_valid_ji = valid.copy()
            else:
                valid = frozen.rep_valid_ij if direction == "ij" else frozen.rep_valid_ji
            diag["rep_skipped"] += int(m - valid.sum())
            qz = np.where(valid, q[:, 2], 1.0)
            px = np.stack(
                [intr.fx * q[:, 0] / qz + intr.cx, intr.fy * q[:, 1] / qz + intr.cy], axis=1
            )
            resid = px - kp_dst
            rho = np.linalg.norm(resid, axis=1)
            delta = cfg.huber_delta_px
            hub = np.where(rho <= delta, 0.5 * rho**2, delta * (rho - 0.5 * delta))
            rep_sum += float(np.sum(hub * valid))
            if compute_grads:
                g_rho = np.where(rho <= delta, rho, delta) * valid
                g_rho *= cfg.reprojection_weight * 0.5 / m
                safe_rho = np.maximum(rho, 1e-300)
                g_resid = (g_rho / safe_rho)[:, None] * resid
                g_q = np.stack(
                    [
                        intr.fx * g_resid[:, 0] / qz,
                        intr.fy * g_resid[:, 1] / qz,
                        -(intr.fx * q[:, 0] * g_resid[:, 0] + intr.fy * q[:, 1] * g_resid[:, 1])
                        / qz**2,
                    ],
                    axis=1,
                )
                g_x = np.einsum("mab,mb->ma", r_dst, g_q)
                if to["pose"]:
                    np.add.at(
                        grads.pose[:, :3],
                        pose_dst,
                        np.cross(g_x, x) * opt_dst[:, None],
                    )
                    np.add.at(grads.pose[:, 3:], pose_dst, -g_x * opt_dst[:, None])
                    np.add.at(
                        grads.pose[:, :3], pose_src, np.cross(x, g_x) * opt_src[:, None]
                    )
                    np.add.at(grads.pose[:, 3:], pose_src, g_x * opt_src[:, None])
        parts.reprojection = rep_sum * 0.5 / m

        if compute_grads:
            opt_all = np.concatenate([mp.opt_i, mp.opt_j]).astype(float)
            field_all = np.concatenate([mp.field_on, mp.field_on]).astype(float)
            df, d_sf = _neus_backward(fwd, g_w_all, f.sharpness)
            df_field = df * field_all[:, None]
            if to["sdf"]:
                kernels.tri_vjp_grid(grads.sdf, fwd["p"].reshape(-1, 3), df_field.reshape(-1))
            if to["sharpness"]:
                grads.sharpness += float(np.sum(d_sf * fwd["f"] * field_all[:, None]))
            if to["pose"]:
                _, sdf_sp = kernels.tri_gather_grad(f.sdf, fwd["p"].reshape(-1, 3))
                g_p = (df.reshape(-1, 1) * sdf_sp).reshape(2 * m, k2, 3)
                g_p[:, : k2 - 1] += g_mu_all
                g_o = g_p.sum(axis=1)
                g_d = (t_all[..., None] * g_p).sum(axis=1)
                _pose_pullback(grads.pose, pose_all, o_all, d_all, g_o, g_d, opt_all)

    if compute_grads:
        # Frozen blocks receive exactly zero even if a path above missed a gate.
        if "sdf" in freeze:
            grads.sdf[:] = 0.0
        if "color_view" in freeze:
            grads.color_view[:] = 0.0
        if "color_flat" in freeze:
            grads.color_flat[:] = 0.0
        if "sharpness" in freeze:
            grads.sharpness = 0.0
        if "pose" in freeze:
            grads.pose[:] = 0.0

    return StepResult(parts, total_loss(parts, cfg), grads, capture, diag)
