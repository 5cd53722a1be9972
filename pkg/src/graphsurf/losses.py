"""Training losses: photometric, Eikonal, ray-overlap (IoU), re-projection.

The ray-overlap loss treats each ray's rendering-weight distribution as an
isotropic mixture of Gaussians along the ray and scores the overlap of two
matched rays by closed-form Gaussian cross-correlation volumes:

    I      = sum_ab w_a w_b N(mu_a - mu_b; (s_a^2 + s_b^2) Id)
    V_X    = same sum within one mixture
    U      = V_A + V_B - I
    loss   = 1 - I / U        (0 for identical rays, -> 1 for disjoint ones)

Identical mixtures give I = V_A = V_B, hence loss 0; far-apart mixtures give
I -> 0, hence loss -> 1. Cauchy-Schwarz bounds I <= U, so the value is in
[0, 1] up to floating-point noise (clamped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, backproject, project


class DegenerateMixture(ValueError):
    """All mixture weights are zero."""


class AllZeroWeights(ValueError):
    """No positive rendering weight along the ray."""


@dataclass
class LossConfig:
    """Loss weights and robustifier parameters."""

    eikonal_weight: float = 0.1
    iou_weight: float = 0.2
    reprojection_weight: float = 0.001
    huber_delta_px: float = 1.0
    sigma_scale: float = 0.5  # MoG sigma = sigma_scale * local sample spacing


@dataclass
class LossParts:
    color_view: float = 0.0
    color_flat: float = 0.0
    eikonal: float = 0.0
    iou: float = 0.0
    reprojection: float = 0.0


def total_loss(parts: LossParts, cfg: LossConfig) -> float:
    return (
        parts.color_view
        + parts.color_flat
        + cfg.eikonal_weight * parts.eikonal
        + cfg.iou_weight * parts.iou
        + cfg.reprojection_weight * parts.reprojection
    )


def color_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean absolute color difference over all rays and channels."""
    return float(np.mean(np.abs(np.asarray(rendered) - np.asarray(target))))


def eikonal_loss(gradients: np.ndarray) -> float:
    """Mean squared deviation of gradient norms from 1."""
    gradients = np.atleast_2d(gradients)
    if gradients.shape[0] < 1:
        raise ValueError("need at least one gradient sample")
    norms = np.linalg.norm(gradients, axis=1)
    return float(np.mean((norms - 1.0) ** 2))


@dataclass
class RayMoG:
    """Isotropic Gaussian mixture along a ray; weights sum to 1."""

    means: np.ndarray  # (M, 3)
    sigmas: np.ndarray  # (M,)
    weights: np.ndarray  # (M,), normalized


def ray_mog(means: np.ndarray, sigmas: np.ndarray, raw_weights: np.ndarray) -> RayMoG:
    """Build a RayMoG from rendering weights; raises DegenerateMixture if all zero."""
    raw_weights = np.asarray(raw_weights, dtype=float)
    total = raw_weights.sum()
    if total <= 0.0:
        raise DegenerateMixture("all rendering weights are zero")
    if np.any(np.asarray(sigmas) <= 0.0):
        raise ValueError("mixture sigmas must be positive")
    return RayMoG(np.atleast_2d(means).astype(float), np.asarray(sigmas, dtype=float), raw_weights / total)


def _cross_volume(a: RayMoG, b: RayMoG):
    """Overlap volume of two mixtures and the pairwise kernel matrix."""
    var = a.sigmas[:, None] ** 2 + b.sigmas[None, :] ** 2
    delta = a.means[:, None, :] - b.means[None, :, :]
    sq = np.einsum("abk,abk->ab", delta, delta)
    g = (2.0 * np.pi * var) ** -1.5 * np.exp(-0.5 * sq / var)
    vol = float(a.weights @ g @ b.weights)
    return vol, g, delta, var


def iou_loss(a: RayMoG, b: RayMoG) -> float:
    loss, _ = iou_loss_with_grads(a, b, need_grads=False)
    return loss


def iou_loss_with_grads(a: RayMoG, b: RayMoG, need_grads: bool = True):
    """Overlap loss and its gradients w.r.t. means and normalized weights.

    Returns (loss, grads) where grads is None or a dict with keys
    d_means_a, d_weights_a, d_means_b, d_weights_b.
    """
    if a.weights.sum() <= 0.0 or b.weights.sum() <= 0.0:
        raise DegenerateMixture("mixture has no positive weight")
    inter, g_ab, delta_ab, var_ab = _cross_volume(a, b)
    vol_a, g_aa, delta_aa, var_aa = _cross_volume(a, a)
    vol_b, g_bb, delta_bb, var_bb = _cross_volume(b, b)
    union = vol_a + vol_b - inter
    loss = float(np.clip(1.0 - inter / union, 0.0, 1.0))
    if not need_grads:
        return loss, None

    d_inter = -(union + inter) / union**2  # d(1 - I/U)/dI with U = VA + VB - I
    d_vol = inter / union**2  # d(1 - I/U)/dV for each self-volume

    dw_a = d_inter * (g_ab @ b.weights) + d_vol * 2.0 * (g_aa @ a.weights)
    dw_b = d_inter * (g_ab.T @ a.weights) + d_vol * 2.0 * (g_bb @ b.weights)

    # dG/dmu_a = G * (-(mu_a - mu_b) / var); self terms get a factor 2.
    coeff_ab = a.weights[:, None] * b.weights[None, :] * g_ab / var_ab
    dm_a = d_inter * -np.einsum("ab,abk->ak", coeff_ab, delta_ab)
    dm_b = d_inter * np.einsum("ab,abk->bk", coeff_ab, delta_ab)
    coeff_aa = a.weights[:, None] * a.weights[None, :] * g_aa / var_aa
    dm_a += d_vol * -2.0 * np.einsum("ab,abk->ak", coeff_aa, delta_aa)
    coeff_bb = b.weights[:, None] * b.weights[None, :] * g_bb / var_bb
    dm_b += d_vol * -2.0 * np.einsum("ab,abk->ak", coeff_bb, delta_bb)

    return loss, {
        "d_means_a": dm_a,
        "d_weights_a": dw_a,
        "d_means_b": dm_b,
        "d_weights_b": dw_b,
    }


def max_weight_depth(weights: np.ndarray, depths: np.ndarray) -> float:
    """Depth of the largest rendering weight; ties break toward the nearer sample."""
    weights = np.asarray(weights, dtype=float)
    if weights.max(initial=0.0) <= 0.0:
        raise AllZeroWeights("no positive weight along the ray")
    return float(np.asarray(depths)[np.argmax(weights)])


def huber(r: float, delta: float) -> float:
    """Huber penalty: r^2/2 inside delta, delta*(r - delta/2) outside."""
    r = abs(r)
    if r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


def huber_derivative(r: float, delta: float) -> float:
    r = abs(r)
    return r if r <= delta else delta


def reprojection_loss(
    kp_i: np.ndarray,
    depth_i: float,
    pose_i: Pose,
    pose_j: Pose,
    intr: Intrinsics,
    kp_j: np.ndarray,
    delta: float,
) -> float:
    """Huber norm of the re-projected pixel residual.

    Back-projects kp_i at depth_i along its unit ray, projects into camera j
    and compares against kp_j. BehindCamera propagates to the caller, which
    is expected to skip the match and count it.
    """
    point = backproject(pose_i, intr, kp_i, depth_i)
    residual = project(pose_j, intr, point) - np.asarray(kp_j, dtype=float)
    return huber(float(np.linalg.norm(residual)), delta)
