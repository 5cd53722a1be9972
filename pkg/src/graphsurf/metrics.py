"""Trajectory, surface, and classification metrics against ground truth.

Trajectories are aligned with a global SIM(3) fitted on inlier camera
centers before computing absolute and relative pose errors. Surface quality
is Chamfer distance and F-score between point sets sampled from the
extracted mesh and from the reference surface.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, Sim3, apply_sim3_to_pose, compose, inverse, rotation_angle_deg, umeyama_sim3


class EmptyPointSet(ValueError):
    """Point-set metric invoked on an empty set."""


@dataclass
class TrajectoryMetrics:
    ape_rot_deg: float
    ape_trans: float
    rpe_rot_deg: float
    rpe_trans: float
    per_pose_rot_deg: np.ndarray
    per_pose_trans: np.ndarray


@dataclass
class SurfaceMetrics:
    chamfer: float
    fscore: float
    precision: float
    recall: float


def align_trajectories(est: list[Pose], gt: list[Pose], inlier_mask: np.ndarray) -> Sim3:
    """SIM(3) on inlier camera centers mapping est -> gt."""
    inlier_mask = np.asarray(inlier_mask, dtype=bool)
    if inlier_mask.sum() < 3:
        from .geometry import DegenerateConfiguration

        raise DegenerateConfiguration("need >= 3 inliers for alignment")
    src = np.stack([p.t for p, m in zip(est, inlier_mask) if m])
    dst = np.stack([p.t for p, m in zip(gt, inlier_mask) if m])
    return umeyama_sim3(src, dst)


def ape_rpe(est: list[Pose], gt: list[Pose], inlier_mask: np.ndarray) -> TrajectoryMetrics:
    """Mean absolute and consecutive-relative pose errors after alignment.

    APE: per-pose geodesic rotation angle and center distance versus ground
    truth. RPE: same errors on consecutive-pair relative transforms.
    """
    if len(est) != len(gt):
        raise ValueError("trajectory lengths differ")
    sim = align_trajectories(est, gt, inlier_mask)
    aligned = [apply_sim3_to_pose(sim, p) for p in est]

    rot_err = np.array([rotation_angle_deg(a.r.T @ g.r) for a, g in zip(aligned, gt)])
    trans_err = np.array([np.linalg.norm(a.t - g.t) for a, g in zip(aligned, gt)])

    rpe_rot, rpe_trans = [], []
    for a0, a1, g0, g1 in zip(aligned[:-1], aligned[1:], gt[:-1], gt[1:]):
        rel_a = compose(inverse(a0), a1)
        rel_g = compose(inverse(g0), g1)
        rpe_rot.append(rotation_angle_deg(rel_a.r.T @ rel_g.r))
        rpe_trans.append(np.linalg.norm(rel_a.t - rel_g.t))

    return TrajectoryMetrics(
        float(rot_err.mean()),
        float(trans_err.mean()),
        float(np.mean(rpe_rot)),
        float(np.mean(rpe_trans)),
        rot_err,
        trans_err,
    )


def nearest_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Nearest-neighbor distance from each query point into reference.

    The tree provides the indices; distances are recomputed with plain
    vector arithmetic so they match a brute-force oracle bit for bit.
    """
    tree = cKDTree(reference)
    _, idx = tree.query(query)
    return np.linalg.norm(query - reference[idx], axis=1)


def chamfer_fscore(pred: np.ndarray, gt: np.ndarray, rho: float) -> SurfaceMetrics:
    """Chamfer distance (symmetric mean NN distance) and F-score at rho."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    gt = np.atleast_2d(np.asarray(gt, dtype=float))
    if pred.shape[0] == 0 or gt.shape[0] == 0:
        raise EmptyPointSet("both point sets must be non-empty")
    d_pred = nearest_distances(pred, gt)
    d_gt = nearest_distances(gt, pred)
    chamfer = 0.5 * (float(d_pred.mean()) + float(d_gt.mean()))
    precision = float(np.mean(d_pred <= rho))
    recall = float(np.mean(d_gt <= rho))
    f = 0.0 if precision + recall == 0.0 else 2.0 * precision * recall / (precision + recall)
    return SurfaceMetrics(chamfer, f, precision, recall)


def classification_metrics(pred_outlier: np.ndarray, gt_outlier: np.ndarray):
    """Precision and recall of the outlier class; 1.0 on empty denominators."""
    pred_outlier = np.asarray(pred_outlier, dtype=bool)
    gt_outlier = np.asarray(gt_outlier, dtype=bool)
    if pred_outlier.shape != gt_outlier.shape:
        raise ValueError("prediction and label lengths differ")
    tp = int(np.sum(pred_outlier & gt_outlier))
    precision = 1.0 if pred_outlier.sum() == 0 else tp / int(pred_outlier.sum())
    recall = 1.0 if gt_outlier.sum() == 0 else tp / int(gt_outlier.sum())
    return float(precision), float(recall)


def sample_mesh_points(verts: np.ndarray, faces: np.ndarray, n: int, rng: np.random.Generator):
    """Uniform-by-area point samples on a triangle mesh."""
    tri = verts[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0:
        raise EmptyPointSet("mesh has no area")
    pick = rng.choice(len(faces), size=n, p=areas / total)
    u = rng.uniform(size=(n, 1))
    v = rng.uniform(size=(n, 1))
    flip = (u + v) > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    t = tri[pick]
    return t[:, 0] + u * (t[:, 1] - t[:, 0]) + v * (t[:, 2] - t[:, 0])


def sample_surface_points(sdf, n: int, rng: np.random.Generator, box: float = 0.9):
    """Points on the zero level set of an analytic SDF.

    Random seeds are projected along the SDF gradient (x <- x - f * grad;
    exact for true distance fields) and polished to |f| < 1e-9.
    """
    out = []
    while sum(len(o) for o in out) < n:
        x = rng.uniform(-box, box, size=(2 * n, 3))
        for _ in range(40):
            f = sdf.f(x)
            if np.max(np.abs(f)) < 1e-9:
                break
            x = x - f[:, None] * sdf.grad(x)
        keep = np.abs(sdf.f(x)) < 1e-9
        out.append(x[keep])
    return np.concatenate(out)[:n]


def write_metrics_report(path, values: dict) -> None:
    """Key-value metrics text report with fixed key names."""
    with open(path, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key} = {value:.9g}\n")


def read_metrics_report(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = float(value)
    return out
