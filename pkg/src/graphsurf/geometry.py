"""SE(3) poses, pinhole projection, and SIM(3) trajectory alignment.

Conventions used throughout the package:

- Poses are camera-to-world: ``x_world = R @ x_cam + t``, so ``t`` is the
  camera center and the columns of ``R`` are the camera axes in world
  coordinates (x right, y down, z forward).
- Tangent vectors are 6-vectors ``[omega, v]`` with the rotation part first
  (radians, axis-angle) and the translation part second (scene units).
- Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8  # below this, use the Taylor branch of exp/log


class AngleNearPi(ValueError):
    """Rotation angle too close to pi for a stable logarithm."""


class BehindCamera(ValueError):
    """Point projects behind the camera plane."""


class NonPositiveDepth(ValueError):
    """Back-projection requested with depth <= 0."""


class DegenerateConfiguration(ValueError):
    """Point set too degenerate for the requested fit."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula; Taylor branch below SMALL_ANGLE."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * k2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Inverse of so3_exp. Raises AngleNearPi within 1e-6 of pi."""
    cos_theta = np.clip(0.5 * (np.trace(r) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta} too close to pi")
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * w
    return (0.5 * theta / np.sin(theta)) * w


def _so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * k2


def _so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(omega)
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    half = 0.5 * theta
    cot = half / np.tan(half)
    b = (1.0 - cot) / (theta * theta)
    return np.eye(3) - 0.5 * k + b * k2


@dataclass
class Pose:
    """Camera-to-world rigid transform."""

    r: np.ndarray  # (3, 3) rotation
    t: np.ndarray  # (3,) camera center in world coordinates

    def copy(self) -> "Pose":
        return Pose(self.r.copy(), self.t.copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.r @ b.r, a.r @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    rt = p.r.T
    return Pose(rt, -rt @ p.t)


def transform_point(p: Pose, x: np.ndarray) -> np.ndarray:
    return p.r @ x + p.t


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a tangent [omega, v]; requires |omega| < pi."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _so3_left_jacobian(omega) @ v)


def se3_log(p: Pose) -> np.ndarray:
    """Inverse of se3_exp; AngleNearPi propagates from the rotation log."""
    omega = so3_log(p.r)
    v = _so3_left_jacobian_inv(omega) @ p.t
    return np.concatenate([omega, v])


def perturb_pose(base: Pose, xi: np.ndarray) -> Pose:
    """Left-multiplied retraction exp(xi) * base used by the optimizers."""
    return compose(se3_exp(xi), base)


def rotation_angle_deg(r: np.ndarray) -> float:
    # atan2 form: accurate near 0 where arccos(trace) loses digits
    cos_theta = 0.5 * (np.trace(r) - 1.0)
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = 0.5 * np.linalg.norm(w)
    return float(np.degrees(np.arctan2(sin_theta, cos_theta)))


def relative_rotation_deg(p_i: Pose, p_j: Pose) -> float:
    """Geodesic angle of R_i^T R_j in degrees, in [0, 180]."""
    return rotation_angle_deg(p_i.r.T @ p_j.r)


@dataclass
class Intrinsics:
    """Pinhole camera; pixel coordinates follow x right / y down."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must be inside the image")


MIN_PROJECT_DEPTH = 1e-8


def project(pose: Pose, intr: Intrinsics, x: np.ndarray) -> np.ndarray:
    """World point to pixel; raises BehindCamera for z_cam <= 1e-8."""
    xc = pose.r.T @ (np.asarray(x, dtype=float) - pose.t)
    if xc[2] <= MIN_PROJECT_DEPTH:
        raise BehindCamera(f"camera-frame depth {xc[2]} <= {MIN_PROJECT_DEPTH}")
    return np.array(
        [intr.fx * xc[0] / xc[2] + intr.cx, intr.fy * xc[1] / xc[2] + intr.cy]
    )


def pixel_ray(pose: Pose, intr: Intrinsics, pixel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World ray (origin, unit direction) through a pixel."""
    pixel = np.asarray(pixel, dtype=float)
    d_cam = np.array(
        [(pixel[0] - intr.cx) / intr.fx, (pixel[1] - intr.cy) / intr.fy, 1.0]
    )
    d_cam /= np.linalg.norm(d_cam)
    return pose.t.copy(), pose.r @ d_cam


def backproject(pose: Pose, intr: Intrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Point at `depth` along the unit ray through `pixel`; depth must be > 0."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} <= 0")
    origin, direction = pixel_ray(pose, intr, pixel)
    return origin + depth * direction


@dataclass
class Sim3:
    """Similarity transform x -> s * R @ x + t."""

    s: float
    r: np.ndarray
    t: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.s * (x @ self.r.T) + self.t

    def inverse(self) -> "Sim3":
        s_inv = 1.0 / self.s
        return Sim3(s_inv, self.r.T, -s_inv * (self.r.T @ self.t))


def umeyama_sim3(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Least-squares Sim3 with dst ~= s * R @ src + t (Umeyama's method).

    Requires >= 3 non-collinear correspondences; raises
    DegenerateConfiguration otherwise.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (N, 3)")
    n = src.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need >= 3 point pairs, got {n}")

    mu_src = src.mean(axis=0)
    mu_dst = dst.mean(axis=0)
    src_c = src - mu_src
    dst_c = dst - mu_dst

    cov = dst_c.T @ src_c / n
    u, d, vt = np.linalg.svd(cov)
    # Collinear sources have (at least) two vanishing singular values in
    # their scatter; the fit direction is then unconstrained.
    scatter = np.linalg.svd(src_c, compute_uv=False)
    if scatter[1] <= 1e-9 * max(scatter[0], 1.0):
        raise DegenerateConfiguration("source points are (near-)collinear")

    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    r = u @ sign @ vt

    var_src = (src_c**2).sum() / n
    s = float(np.trace(np.diag(d) @ sign) / var_src)
    t = mu_dst - s * r @ mu_src
    return Sim3(s, r, t)


def apply_sim3_to_pose(sim: Sim3, pose: Pose) -> Pose:
    """Map a camera-to-world pose through a global Sim3 (centers scale)."""
    return Pose(sim.r @ pose.r, sim.apply(pose.t))


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (x, y, z, w), w >= 0."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        w = (r[2, 1] - r[1, 2]) / s
        x = 0.25 * s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        y = 0.25 * s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def write_trajectory(path, ids, poses) -> None:
    """One pose per line: `id tx ty tz qx qy qz qw` (quaternion scalar-last)."""
    with open(path, "w") as fh:
        for node_id, pose in zip(ids, poses):
            q = rot_to_quat(pose.r)
            t = pose.t
            fh.write(
                f"{node_id} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
                f"{q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g}\n"
            )


def read_trajectory(path) -> tuple[list[int], list[Pose]]:
    ids: list[int] = []
    poses: list[Pose] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"expected 8 fields per trajectory line, got {len(parts)}")
            ids.append(int(parts[0]))
            t = np.array([float(v) for v in parts[1:4]])
            q = np.array([float(v) for v in parts[4:8]])
            poses.append(Pose(quat_to_rot(q), t))
    return ids, poses


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> Pose:
    """Camera-to-world pose at `eye` with +z toward `target`, y pointing down."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("view direction parallel to up vector")
    x = x / nx
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)
