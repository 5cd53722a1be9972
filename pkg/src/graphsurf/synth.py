"""Synthetic scenes with analytic ground truth.

Stands in for the real-data front end (SfM poses, feature matching): scenes
are analytic signed distance fields with a deterministic procedural surface
color, cameras sit on a jittered inward-facing ring, images come from sphere
tracing, and keypoint matches are projections of shared visible surface
points plus a controllable fraction of wrong matches. Every pose and match
carries a hidden ground-truth label used only by evaluation.

The bumpy sphere is a union of a base sphere and small protruding spheres;
the min of exact distance fields keeps |grad| = 1 almost everywhere while
giving the surface pose-revealing relief.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .geometry import Intrinsics, Pose, look_at, project, so3_exp
from .scene_graph import Edge, SceneGraph


class InsufficientCovisibility(ValueError):
    """A node ended up with no covisible partner providing >= 8 shared points."""


# ---------------------------------------------------------------------------
# analytic SDFs


class SphereSdf:
    kind = "sphere"

    def __init__(self, radius: float = 0.5):
        self.radius = radius

    def f(self, pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(pts, axis=-1) - self.radius

    def grad(self, pts: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(pts, axis=-1, keepdims=True)
        return pts / np.maximum(n, 1e-300)

    def params(self) -> dict:
        return {"radius": self.radius}


class TorusSdf:
    kind = "torus"

    def __init__(self, major: float = 0.45, minor: float = 0.18):
        self.major = major
        self.minor = minor

    def f(self, pts: np.ndarray) -> np.ndarray:
        ring = np.linalg.norm(pts[..., :2], axis=-1) - self.major
        return np.sqrt(ring**2 + pts[..., 2] ** 2) - self.minor

    def grad(self, pts: np.ndarray) -> np.ndarray:
        rho = np.maximum(np.linalg.norm(pts[..., :2], axis=-1), 1e-300)
        ring = rho - self.major
        dist = np.maximum(np.sqrt(ring**2 + pts[..., 2] ** 2), 1e-300)
        g = np.empty_like(pts)
        g[..., 0] = ring / dist * pts[..., 0] / rho
        g[..., 1] = ring / dist * pts[..., 1] / rho
        g[..., 2] = pts[..., 2] / dist
        return g

    def params(self) -> dict:
        return {"major": self.major, "minor": self.minor}


class BumpySphereSdf:
    """Base sphere with protruding bump spheres; union of exact SDFs."""

    kind = "sphere_bumps"

    def __init__(self, radius: float = 0.5, n_bumps: int = 10, bump_seed: int = 7):
        self.radius = radius
        self.n_bumps = n_bumps
        self.bump_seed = bump_seed
        rng = np.random.default_rng(bump_seed)
        dirs = rng.normal(size=(n_bumps, 3))
        # Keep bumps in the band the inward ring actually sees.
        dirs[:, 2] = np.abs(dirs[:, 2]) * rng.uniform(-0.6, 0.9, size=n_bumps)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        self.bump_radii = rng.uniform(0.06, 0.12, size=n_bumps)
        self.bump_centers = dirs * (radius + 0.45 * self.bump_radii)[:, None]

    def f(self, pts: np.ndarray) -> np.ndarray:
        best = np.linalg.norm(pts, axis=-1) - self.radius
        for c, r in zip(self.bump_centers, self.bump_radii):
            best = np.minimum(best, np.linalg.norm(pts - c, axis=-1) - r)
        return best

    def grad(self, pts: np.ndarray) -> np.ndarray:
        pts2 = np.atleast_2d(pts)
        dists = [np.linalg.norm(pts2, axis=-1) - self.radius]
        for c, r in zip(self.bump_centers, self.bump_radii):
            dists.append(np.linalg.norm(pts2 - c, axis=-1) - r)
        stack = np.stack(dists, axis=0)
        pick = np.argmin(stack, axis=0)
        g = np.empty_like(pts2)
        base = pick == 0
        n = np.maximum(np.linalg.norm(pts2[base], axis=-1, keepdims=True), 1e-300)
        g[base] = pts2[base] / n
        for b, (c, _) in enumerate(zip(self.bump_centers, self.bump_radii), start=1):
            sel = pick == b
            if np.any(sel):
                rel = pts2[sel] - c
                g[sel] = rel / np.maximum(np.linalg.norm(rel, axis=-1, keepdims=True), 1e-300)
        return g.reshape(np.shape(pts))

    def params(self) -> dict:
        return {"radius": self.radius, "n_bumps": self.n_bumps, "bump_seed": self.bump_seed}


SDF_KINDS = {"sphere": SphereSdf, "torus": TorusSdf, "sphere_bumps": BumpySphereSdf}


@dataclass
class SceneSpec:
    kind: str = "sphere_bumps"
    sdf_params: dict = dataclass_field(default_factory=dict)
    color_seed: int = 11
    texture_freq: float = 6.0
    texture_octaves: int = 2
    texture_contrast: float = 1.0

    def sdf(self):
        return SDF_KINDS[self.kind](**self.sdf_params)


# ---------------------------------------------------------------------------
# procedural surface color (deterministic band-limited hash noise)

_M1 = np.uint64(0x9E3779B185EBCA87)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0x165667B19E3779F9)
_MIX1 = np.uint64(0xFF51AFD7ED558CCD)
_MIX2 = np.uint64(0xC4CEB9FE1A85EC53)


def _hash01(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic lattice hash to [0, 1); wraps in uint64 on purpose."""
    with np.errstate(over="ignore"):
        h = (
            (ix.astype(np.uint64) * _M1)
            ^ (iy.astype(np.uint64) * _M2)
            ^ (iz.astype(np.uint64) * _M3)
            ^ np.uint64(salt)
        )
        h ^= h >> np.uint64(33)
        h *= _MIX1
        h ^= h >> np.uint64(33)
        h *= _MIX2
        h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) / float(2**53)


def _value_noise(pts: np.ndarray, freq: float, salt: int) -> np.ndarray:
    """Trilinearly interpolated lattice noise, one channel, in [0, 1)."""
    u = pts * freq + 4096.0  # shift keeps lattice indices positive
    c = np.floor(u)
    a = u - c
    ci = c.astype(np.int64)
    out = np.zeros(pts.shape[0])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (a[:, 0] if dx else 1 - a[:, 0])
                    * (a[:, 1] if dy else 1 - a[:, 1])
                    * (a[:, 2] if dz else 1 - a[:, 2])
                )
                out += w * _hash01(ci[:, 0] + dx, ci[:, 1] + dy, ci[:, 2] + dz, salt)
    return out


def surface_color(pts: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Deterministic RGB texture in [0, 1] for surface points (N, 3)."""
    pts = np.atleast_2d(pts)
    rgb = np.zeros((pts.shape[0], 3))
    for ch in range(3):
        total = np.zeros(pts.shape[0])
        norm = 0.0
        for octave in range(spec.texture_octaves):
            amp = 0.5**octave
            salt = spec.color_seed * 1000003 + ch * 7919 + octave * 131
            total += amp * _value_noise(pts, spec.texture_freq * 2**octave, salt)
            norm += amp
        rgb[:, ch] = total / norm
    return np.clip(0.5 + spec.texture_contrast * (rgb - 0.5), 0.0, 1.0)


# ---------------------------------------------------------------------------
# cameras, tracing, images


@dataclass
class DatasetSpec:
    n_cameras: int = 30
    ring_radius: float = 1.8
    elev_deg_lo: float = -10.0
    elev_deg_hi: float = 35.0
    azimuth_jitter_deg: float = 2.0
    image_size: int = 96
    focal_px: float = 110.0
    outlier_fraction: float = 0.2
    outlier_rot_deg: float = 5.0
    outlier_trans: float = 0.05
    inlier_rot_deg: float = 0.5
    inlier_trans: float = 0.005
    pair_max_angle_deg: float = 70.0
    kp_per_pair: int = 40
    wrong_match_fraction: float = 0.2
    kp_quant_px: float = 0.1

    def validate(self) -> None:
        if self.n_cameras < 8:
            raise ValueError("need at least 8 cameras")
        if not 0.0 <= self.outlier_fraction < 0.5:
            raise ValueError("outlier fraction must be in [0, 0.5)")
        for name in ("outlier_rot_deg", "outlier_trans", "inlier_rot_deg", "inlier_trans"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def intrinsics(self) -> Intrinsics:
        s = self.image_size
        return Intrinsics(self.focal_px, self.focal_px, s / 2.0, s / 2.0, s, s)


def sphere_trace(sdf, origins: np.ndarray, dirs: np.ndarray, t_max: float = 4.0):
    """March along rays until |f| < 1e-10 or the ray leaves the scene.

    Returns (t, hit). Exact distance fields make plain stepping reliable.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    t = np.zeros(origins.shape[0])
    hit = np.zeros(origins.shape[0], dtype=bool)
    active = np.ones(origins.shape[0], dtype=bool)
    for _ in range(128):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        f = sdf.f(p)
        converged = np.abs(f) < 1e-10
        idx = np.flatnonzero(active)
        hit[idx[converged]] = True
        t[idx] += np.maximum(f, 0.0) * (~converged)
        still = ~converged & (t[idx] <= t_max)
        active[idx] = still
    return t, hit


def camera_rays(pose: Pose, intr: Intrinsics):
    """Rays through all pixel centers; returns (origins (H*W,3), dirs (H*W,3))."""
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height), indexing="xy")
    d_cam = np.stack(
        [(u.ravel() - intr.cx) / intr.fx, (v.ravel() - intr.cy) / intr.fy, np.ones(u.size)],
        axis=1,
    )
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ pose.r.T
    origins = np.broadcast_to(pose.t, dirs.shape).copy()
    return origins, dirs


def render_gt_image(scene: SceneSpec, pose: Pose, intr: Intrinsics):
    """Sphere-traced image (H, W, 3) and ray-depth map (H, W); misses are black."""
    sdf = scene.sdf()
    origins, dirs = camera_rays(pose, intr)
    t, hit = sphere_trace(sdf, origins, dirs)
    img = np.zeros((origins.shape[0], 3))
    if hit.any():
        img[hit] = surface_color(origins[hit] + t[hit, None] * dirs[hit], scene)
    depth = np.where(hit, t, -1.0)
    shape = (intr.height, intr.width)
    return img.reshape(shape + (3,)), depth.reshape(shape)


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    scene: SceneSpec
    spec: DatasetSpec
    intr: Intrinsics
    images: np.ndarray  # (N, H, W, 3)
    gt_poses: list[Pose]
    init_poses: list[Pose]
    graph: SceneGraph  # raw graph, all matches alive
    outlier_mask: np.ndarray  # (N,) bool, hidden ground truth
    wrong_masks: dict  # (i, j) -> (M,) bool, hidden ground truth
    seed: int


def _ring_poses(spec: DatasetSpec, rng: np.random.Generator) -> list[Pose]:
    poses = []
    for i in range(spec.n_cameras):
        az = 2.0 * np.pi * i / spec.n_cameras + np.radians(
            rng.uniform(-spec.azimuth_jitter_deg, spec.azimuth_jitter_deg)
        )
        elev = np.radians(rng.uniform(spec.elev_deg_lo, spec.elev_deg_hi))
        eye = spec.ring_radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)]
        )
        poses.append(look_at(eye, np.zeros(3), np.array([0.0, 0.0, 1.0])))
    return poses


def _noisy_pose(pose: Pose, rot_deg: float, trans: float, rng: np.random.Generator) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rot_deg) * rng.normal()
    r = so3_exp(axis * angle) @ pose.r
    t = pose.t + trans * rng.normal(size=3)
    return Pose(r, t)


def _mirror_pose(pose: Pose) -> Pose:
    """180 degrees about the scene (z) axis: the ring's mirror ambiguity."""
    m = so3_exp(np.array([0.0, 0.0, np.pi]))
    return Pose(m @ pose.r, m @ pose.t)


def _quantize(px: np.ndarray, quant: float) -> np.ndarray:
    if quant <= 0.0:
        return px
    return np.round(px / quant) * quant


def generate_dataset(scene: SceneSpec, spec: DatasetSpec, seed: int) -> Dataset:
    """Deterministic scene + cameras + images + noisy poses + matches.

    Outlier count is floor(n_cameras * outlier_fraction). Wrong matches are
    resampled until their pixel error exceeds 5 px. Candidate pairs whose
    covisibility yields fewer than 8 shared points produce no edge; if that
    leaves a node isolated, InsufficientCovisibility is raised.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    intr = spec.intrinsics()
    sdf = scene.sdf()
    gt_poses = _ring_poses(spec, rng)
    n = spec.n_cameras

    images = np.zeros((n, intr.height, intr.width, 3))
    depths = np.zeros((n, intr.height, intr.width))
    for i, pose in enumerate(gt_poses):
        images[i], depths[i] = render_gt_image(scene, pose, intr)

    n_out = int(np.floor(n * spec.outlier_fraction))
    outlier_ids = rng.choice(n, size=n_out, replace=False) if n_out else np.array([], dtype=int)
    outlier_mask = np.zeros(n, dtype=bool)
    outlier_mask[outlier_ids] = True

    init_poses = []
    for i, pose in enumerate(gt_poses):
        if outlier_mask[i]:
            init_poses.append(
                _noisy_pose(_mirror_pose(pose), spec.outlier_rot_deg, spec.outlier_trans, rng)
            )
        else:
            init_poses.append(_noisy_pose(pose, spec.inlier_rot_deg, spec.inlier_trans, rng))

    graph = SceneGraph(n)
    wrong_masks: dict = {}
    for i in range(n):
        for j in range(i + 1, n):
            ang = np.degrees(
                np.arccos(
                    np.clip(0.5 * (np.trace(gt_poses[i].r.T @ gt_poses[j].r) - 1.0), -1.0, 1.0)
                )
            )
            if ang > spec.pair_max_angle_deg:
                continue
            kp_i, kp_j, wrong = _make_matches(
                sdf, scene, spec, intr, gt_poses[i], gt_poses[j], depths[i], rng
            )
            if kp_i is None:
                continue
            graph.add_edge(Edge(i, j, kp_i, kp_j, np.ones(len(kp_i), dtype=bool)))
            wrong_masks[(i, j)] = wrong
    for i in range(n):
        if not graph.edges_of(i):
            raise InsufficientCovisibility(f"node {i} shares < 8 points with every partner")

    return Dataset(
        scene, spec, intr, images, gt_poses, init_poses, graph, outlier_mask, wrong_masks, seed
    )


def _make_matches(sdf, scene, spec, intr, pose_i, pose_j, depth_i, rng):
    """Shared visible surface points projected into both images."""
    hit_rows, hit_cols = np.nonzero(depth_i > 0.0)
    if len(hit_rows) < 8:
        return None, None, None
    want = spec.kp_per_pair
    order = rng.permutation(len(hit_rows))
    kp_i_list, kp_j_list = [], []
    for idx in order:
        if len(kp_i_list) >= want:
            break
        px_i = np.array([hit_cols[idx], hit_rows[idx]], dtype=float)
        t_hit = depth_i[hit_rows[idx], hit_cols[idx]]
        d_cam = np.array([(px_i[0] - intr.cx) / intr.fx, (px_i[1] - intr.cy) / intr.fy, 1.0])
        d_cam /= np.linalg.norm(d_cam)
        x = pose_i.t + t_hit * (pose_i.r @ d_cam)
        xc = pose_j.r.T @ (x - pose_j.t)
        if xc[2] <= 1e-8:
            continue
        px_j = np.array(
            [intr.fx * xc[0] / xc[2] + intr.cx, intr.fy * xc[1] / xc[2] + intr.cy]
        )
        if not (0 <= px_j[0] <= intr.width - 1 and 0 <= px_j[1] <= intr.height - 1):
            continue
        # occlusion check: the ray through px_j must reach x itself
        d_cam_j = np.array(
            [(px_j[0] - intr.cx) / intr.fx, (px_j[1] - intr.cy) / intr.fy, 1.0]
        )
        d_cam_j /= np.linalg.norm(d_cam_j)
        dir_j = pose_j.r @ d_cam_j
        t_j, hit_j = sphere_trace(sdf, pose_j.t[None], dir_j[None])
        if not hit_j[0]:
            continue
        p_seen = pose_j.t + t_j[0] * dir_j
        if np.linalg.norm(p_seen - x) > 1e-5:
            continue
        kp_i_list.append(px_i)
        kp_j_list.append(px_j)
    if len(kp_i_list) < 8:
        return None, None, None

    kp_i = _quantize(np.array(kp_i_list), spec.kp_quant_px)
    kp_j = np.array(kp_j_list)
    m = len(kp_i)
    wrong = np.zeros(m, dtype=bool)
    n_wrong = int(np.floor(m * spec.wrong_match_fraction))
    if n_wrong:
        wrong_idx = rng.choice(m, size=n_wrong, replace=False)
        for idx in wrong_idx:
            while True:
                fake = rng.uniform([0, 0], [intr.width - 1, intr.height - 1])
                if np.linalg.norm(fake - kp_j[idx]) > 5.0:
                    kp_j[idx] = fake
                    break
        wrong[wrong_idx] = True
    kp_j = _quantize(kp_j, spec.kp_quant_px)
    return kp_i, kp_j, wrong


# ---------------------------------------------------------------------------
# disk format


def save_dataset(out_dir, ds: Dataset) -> None:
    """Dataset directory: manifest, PFM images, trajectories, graph, labels."""
    from pathlib import Path

    from .geometry import write_trajectory
    from .scene_graph import save_graph

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser()
    cp["scene"] = {
        "kind": ds.scene.kind,
        **{k: repr(v) for k, v in ds.scene.sdf().params().items()},
        "color_seed": str(ds.scene.color_seed),
        "texture_freq": repr(ds.scene.texture_freq),
        "texture_octaves": str(ds.scene.texture_octaves),
        "texture_contrast": repr(ds.scene.texture_contrast),
    }
    cp["dataset"] = {
        k: repr(getattr(ds.spec, k)) for k in DatasetSpec.__dataclass_fields__
    }
    cp["meta"] = {"seed": str(ds.seed)}
    with open(out / "manifest.ini", "w") as fh:
        cp.write(fh)
    for i in range(len(ds.images)):
        write_pfm(out / "images" / f"{i:04d}.pfm", ds.images[i])
    write_trajectory(out / "poses_gt.txt", range(len(ds.gt_poses)), ds.gt_poses)
    write_trajectory(out / "poses_init.txt", range(len(ds.init_poses)), ds.init_poses)
    save_graph(out / "graph.txt", ds.graph)
    with open(out / "labels.txt", "w") as fh:
        for i, flag in enumerate(ds.outlier_mask):
            fh.write(f"node {i} {int(flag)}\n")
        for (i, j), mask in sorted(ds.wrong_masks.items()):
            bits = " ".join(str(int(b)) for b in mask)
            fh.write(f"edge {i} {j} {bits}\n")


def _scene_from_manifest(cp: configparser.ConfigParser) -> SceneSpec:
    sec = cp["scene"]
    kind = sec["kind"]
    param_keys = {
        "sphere": ("radius",),
        "torus": ("major", "minor"),
        "sphere_bumps": ("radius", "n_bumps", "bump_seed"),
    }[kind]
    params = {}
    for key in param_keys:
        value = sec[key]
        params[key] = int(value) if key in ("n_bumps", "bump_seed") else float(value)
    return SceneSpec(
        kind=kind,
        sdf_params=params,
        color_seed=int(sec["color_seed"]),
        texture_freq=float(sec["texture_freq"]),
        texture_octaves=int(sec["texture_octaves"]),
        texture_contrast=float(sec["texture_contrast"]),
    )


def load_dataset(in_dir) -> Dataset:
    from pathlib import Path

    from .geometry import read_trajectory
    from .scene_graph import load_graph

    src = Path(in_dir)
    cp = configparser.ConfigParser()
    if not cp.read(src / "manifest.ini"):
        raise FileNotFoundError(f"no manifest.ini under {src}")
    scene = _scene_from_manifest(cp)
    dsec = cp["dataset"]
    defaults = DatasetSpec()
    spec = DatasetSpec(
        **{
            name: (int(dsec[name]) if isinstance(getattr(defaults, name), int) else float(dsec[name]))
            for name in DatasetSpec.__dataclass_fields__
        }
    )
    seed = int(cp["meta"]["seed"])
    _, gt_poses = read_trajectory(src / "poses_gt.txt")
    _, init_poses = read_trajectory(src / "poses_init.txt")
    graph = load_graph(src / "graph.txt")
    n = spec.n_cameras
    intr = spec.intrinsics()
    images = np.stack([read_pfm(src / "images" / f"{i:04d}.pfm") for i in range(n)])
    outlier_mask = np.zeros(n, dtype=bool)
    wrong_masks: dict = {}
    with open(src / "labels.txt") as fh:
        for line in fh:
            parts = line.split()
            if parts[0] == "node":
                outlier_mask[int(parts[1])] = bool(int(parts[2]))
            elif parts[0] == "edge":
                wrong_masks[(int(parts[1]), int(parts[2]))] = np.array(
                    [bool(int(b)) for b in parts[3:]]
                )
    return Dataset(
        scene, spec, intr, images, gt_poses, init_poses, graph, outlier_mask, wrong_masks, seed
    )


# ---------------------------------------------------------------------------
# PFM image IO (32-bit float, color)


def write_pfm(path, img: np.ndarray) -> None:
    img32 = np.flipud(np.asarray(img, dtype=np.float32))  # PFM rows go bottom-up
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(img32.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"PF":
            raise ValueError("only color PFM supported")
        w, h = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(w * h * 3 * 4), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(h, w, 3)).astype(np.float64)
