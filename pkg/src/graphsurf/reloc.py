"""Monte Carlo re-localization of outlier poses.

Inward-facing captures suffer a mirror ambiguity: a pose reflected across
the capture ring's axis explains the matches almost as well as the true one
and local optimization cannot cross over. Re-localization spawns candidate
poses (particles) by rotating the outlier pose about the scene axis in equal
angular steps, optimizes each particle's pose against the frozen field using
the flat color head (gradients flow into the pose only), allocates later
optimization steps by a softmax over recent per-particle PSNR, and finally
adopts the best particle if it beats the incumbent.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import autodiff
from .field import Field, ray_cube_intersect, render_batch, stratified_depths
from .geometry import Intrinsics, Pose, compose, se3_exp, so3_exp
from .losses import LossConfig


class DegenerateRing(ValueError):
    """Too few or collinear camera centers for axis estimation."""


@dataclass
class Axis:
    direction: np.ndarray  # unit 3-vector
    anchor: np.ndarray  # point on the axis


@dataclass
class RelocConfig:
    n_particles: int = 24
    stage1_steps: int = 300
    stage2_steps: int = 700
    lr: float = 1e-2
    momentum: float = 0.9
    rays_per_step: int = 64
    samples_per_ray: int = 32
    psnr_window: int = 10
    accept_margin_db: float = 0.1


@dataclass
class Particle:
    pose: Pose
    psnr_history: deque = dataclass_field(default_factory=lambda: deque(maxlen=10))
    probability: float = 0.0


@dataclass
class ParticleSet:
    particles: list[Particle]

    def poses(self) -> list[Pose]:
        return [p.pose for p in self.particles]


@dataclass
class RelocResult:
    node_id: int
    accepted: bool
    pose: Pose
    incumbent_psnr: float
    particle_psnrs: np.ndarray
    chosen: int


def estimate_axis(inlier_poses: list[Pose]) -> Axis:
    """Normal of the best-fit plane of the camera centers.

    Direction = eigenvector of the center covariance with the smallest
    eigenvalue, signed to have non-negative dot with the mean camera
    up-vector; anchor = centroid. Raises DegenerateRing for < 3 poses or
    collinear centers.
    """
    if len(inlier_poses) < 3:
        raise DegenerateRing(f"need >= 3 inlier poses, got {len(inlier_poses)}")
    centers = np.stack([p.t for p in inlier_poses])
    anchor = centers.mean(axis=0)
    centered = centers - anchor
    cov = centered.T @ centered / len(centers)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] <= 1e-12 * max(evals[2], 1.0):
        raise DegenerateRing("camera centers are (near-)collinear")
    direction = evecs[:, 0]
    # camera up in world coordinates is -R[:, 1] (y points down in-camera)
    mean_up = -np.mean(np.stack([p.r[:, 1] for p in inlier_poses]), axis=0)
    if direction @ mean_up < 0:
        direction = -direction
    return Axis(direction / np.linalg.norm(direction), anchor)


def axis_rotation(axis: Axis, theta: float) -> Pose:
    """World rigid transform rotating by theta about the axis line."""
    r = so3_exp(axis.direction * theta)
    return Pose(r, axis.anchor - r @ axis.anchor)


def spawn_particles(outlier: Pose, axis: Axis, n_particles: int) -> ParticleSet:
    """Particles i = 1..N at angles i * 2*pi / N about the scene axis.

    Particle N completes the full turn and coincides with the outlier pose;
    probabilities start uniform.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    particles = []
    for i in range(1, n_particles + 1):
        rot = axis_rotation(axis, 2.0 * np.pi * i / n_particles)
        particles.append(Particle(compose(rot, outlier), probability=1.0 / n_particles))
    return ParticleSet(particles)


def particle_distribution(pset: ParticleSet, window: int = 10) -> np.ndarray:
    """Softmax (with min-shift) over the recent-mean PSNR of each particle."""
    recent = []
    for p in pset.particles:
        if len(p.psnr_history) == 0:
            raise ValueError("every particle needs at least one PSNR entry")
        hist = list(p.psnr_history)[-window:]
        recent.append(float(np.mean(hist)))
    recent = np.array(recent)
    e = np.exp(recent - recent.min())
    probs = e / e.sum()
    for p, prob in zip(pset.particles, probs):
        p.probability = float(prob)
    return probs


def _psnr_step(
    fld: Field,
    pose: Pose,
    image: np.ndarray,
    intr: Intrinsics,
    cfg: RelocConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    velocity: np.ndarray | None,
):
    """One pose-only gradient step on the flat color loss; returns PSNR too.

    With velocity None the pose is only evaluated (no step), which is how
    the incumbent's PSNR history is collected.
    """
    px = np.stack(
        [
            rng.integers(0, intr.width, size=cfg.rays_per_step),
            rng.integers(0, intr.height, size=cfg.rays_per_step),
        ],
        axis=1,
    ).astype(float)
    targets = image[px[:, 1].astype(int), px[:, 0].astype(int)]
    d_cam = autodiff.pixel_dirs_cam(intr, px)
    d = d_cam @ pose.r.T
    o = np.broadcast_to(pose.t, d.shape)
    t_near, t_far, hit = ray_cube_intersect(o, d)
    if not hit.any():
        return pose, float("nan"), velocity
    t_near, t_far = t_near[hit], t_far[hit]
    t = stratified_depths(t_near, t_far, cfg.samples_per_ray, rng)
    plan = autodiff.StepPlan(
        rays=autodiff.RayBatchPlan(
            pose_idx=np.zeros(int(hit.sum()), dtype=int),
            pixels=px[hit],
            targets=targets[hit],
            t=t,
        )
    )
    fwd = render_batch(fld, o[hit], d[hit], t)
    mse = float(np.mean((fwd["rendered_flat"] - targets[hit]) ** 2))
    psnr = -10.0 * np.log10(max(mse, 1e-10))
    if velocity is None:
        return pose, psnr, None
    res = autodiff.evaluate_step(
        fld,
        [pose],
        intr,
        plan,
        loss_cfg,
        freeze=frozenset({"sdf", "color_view", "color_flat", "sharpness"}),
        flat_to_pose=True,
    )
    velocity = cfg.momentum * velocity - cfg.lr * res.grads.pose[0]
    return compose(se3_exp(velocity), pose), psnr, velocity


def run_relocalization(
    node_id: int,
    fld: Field,
    outlier_pose: Pose,
    axis: Axis,
    image: np.ndarray,
    intr: Intrinsics,
    cfg: RelocConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> RelocResult:
    """Two-stage particle optimization against a frozen field.

    Stage 1 cycles through the particles with equal budget; stage 2 draws
    particles from the PSNR softmax. The outlier pose is replaced only if
    the best particle's recent-mean PSNR beats the incumbent's by the accept
    margin.
    """
    pset = spawn_particles(outlier_pose, axis, cfg.n_particles)
    for p in pset.particles:
        p.psnr_history = deque(maxlen=cfg.psnr_window)
    velocities = [np.zeros(6) for _ in pset.particles]

    for step in range(cfg.stage1_steps):
        i = step % cfg.n_particles
        p = pset.particles[i]
        p.pose, psnr, velocities[i] = _psnr_step(
            fld, p.pose, image, intr, cfg, loss_cfg, rng, velocities[i]
        )
        if np.isfinite(psnr):
            p.psnr_history.append(psnr)

    for p in pset.particles:
        if len(p.psnr_history) == 0:
            p.psnr_history.append(-1e9)  # never rendered anything: hopeless pose

    for _ in range(cfg.stage2_steps):
        probs = particle_distribution(pset, cfg.psnr_window)
        i = int(rng.choice(cfg.n_particles, p=probs))
        p = pset.particles[i]
        p.pose, psnr, velocities[i] = _psnr_step(
            fld, p.pose, image, intr, cfg, loss_cfg, rng, velocities[i]
        )
        if np.isfinite(psnr):
            p.psnr_history.append(psnr)

    incumbent_hist = deque(maxlen=cfg.psnr_window)
    for _ in range(cfg.psnr_window):
        _, psnr, _ = _psnr_step(fld, outlier_pose, image, intr, cfg, loss_cfg, rng, None)
        if np.isfinite(psnr):
            incumbent_hist.append(psnr)
    incumbent = float(np.mean(incumbent_hist)) if incumbent_hist else -1e9

    finals = np.array([float(np.mean(p.psnr_history)) for p in pset.particles])
    chosen = int(np.argmax(finals))
    accepted = finals[chosen] > incumbent + cfg.accept_margin_db
    pose = pset.particles[chosen].pose if accepted else outlier_pose
    return RelocResult(node_id, bool(accepted), pose, incumbent, finals, chosen)
