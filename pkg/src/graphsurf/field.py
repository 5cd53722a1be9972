"""Trainable SDF grid with two color heads and NeuS-style volume rendering.

The geometry is a dense trilinear SDF grid over [-1, 1]^3. Colors come from
two heads sharing the same sample points and rendering weights:

- the view head stores a base color plus coefficients for a small set of
  direction features (sinusoidal encoding of the unit ray direction), so it
  can explain view-dependent appearance;
- the flat head stores a single color per cell and ignores direction. Its
  training loss is routed only into its own grid (see autodiff), which makes
  its PSNR a pose-quality indicator that view-dependent overfitting cannot
  inflate.

Rendering converts SDF values to opacities via the logistic CDF with a
trainable sharpness: alpha_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0),
weights w_i = T_i * alpha_i. With K sample depths per ray there are K - 1
weights; colors are taken at the first K - 1 samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels import DOMAIN_HI, DOMAIN_LO


class NoIntersection(ValueError):
    """Ray misses the field's bounding cube."""


class EmptyLevelSet(ValueError):
    """SDF grid has no zero crossing to mesh."""


def dir_feature_count(octaves: int) -> int:
    return 3 + 6 * octaves


def dir_features(d: np.ndarray, octaves: int) -> np.ndarray:
    """Direction features: the raw components plus sin/cos octaves."""
    d = np.atleast_2d(d)
    feats = [d]
    for level in range(octaves):
        scaled = (2.0**level) * np.pi * d
        feats.append(np.sin(scaled))
        feats.append(np.cos(scaled))
    return np.concatenate(feats, axis=1)


def dir_features_jacobian(d: np.ndarray, octaves: int) -> np.ndarray:
    """d(features)/d(direction), shape (N, F, 3); diagonal per feature triple."""
    d = np.atleast_2d(d)
    n = d.shape[0]
    jac = np.zeros((n, dir_feature_count(octaves), 3))
    jac[:, :3] = np.eye(3)
    col = 3
    for level in range(octaves):
        k = (2.0**level) * np.pi
        scaled = k * d
        for axis in range(3):
            jac[:, col + axis, axis] = k * np.cos(scaled[:, axis])
            jac[:, col + 3 + axis, axis] = -k * np.sin(scaled[:, axis])
        col += 6
    return jac


@dataclass
class FieldConfig:
    res: int = 64
    dir_octaves: int = 2
    init_radius: float = 0.5
    init_sharpness: float = 30.0
    init_color: float = 0.5


class Field:
    """Parameter container; all blocks are float64 numpy arrays."""

    def __init__(
        self,
        sdf: np.ndarray,
        color_view: np.ndarray,
        color_flat: np.ndarray,
        sharpness: float,
        dir_octaves: int,
    ):
        expected = 3 + 3 * dir_feature_count(dir_octaves)
        if color_view.shape[3] != expected:
            raise ValueError(
                f"color_view has {color_view.shape[3]} channels, expected {expected}"
            )
        self.sdf = sdf
        self.color_view = color_view
        self.color_flat = color_flat
        self.sharpness = float(sharpness)
        self.dir_octaves = dir_octaves

    @property
    def res(self) -> int:
        return self.sdf.shape[0]

    @property
    def cell_size(self) -> float:
        return (DOMAIN_HI - DOMAIN_LO) / (self.res - 1)

    @classmethod
    def create(cls, cfg: FieldConfig) -> "Field":
        r = cfg.res
        axis = np.linspace(DOMAIN_LO, DOMAIN_HI, r)
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
        sdf = np.sqrt(gx**2 + gy**2 + gz**2) - cfg.init_radius
        n_feat = dir_feature_count(cfg.dir_octaves)
        color_view = np.zeros((r, r, r, 3 + 3 * n_feat))
        color_view[..., :3] = cfg.init_color
        color_flat = np.full((r, r, r, 3), cfg.init_color)
        return cls(sdf, color_view, color_flat, cfg.init_sharpness, cfg.dir_octaves)

    def grid_blocks(self) -> dict[str, np.ndarray]:
        return {
            "sdf": self.sdf,
            "color_view": self.color_view,
            "color_flat": self.color_flat,
        }

    def copy(self) -> "Field":
        return Field(
            self.sdf.copy(),
            self.color_view.copy(),
            self.color_flat.copy(),
            self.sharpness,
            self.dir_octaves,
        )

    def save(self, path) -> None:
        np.savez(
            path,
            sdf=self.sdf,
            color_view=self.color_view,
            color_flat=self.color_flat,
            sharpness=np.array(self.sharpness),
            dir_octaves=np.array(self.dir_octaves),
        )

    @classmethod
    def load(cls, path) -> "Field":
        data = np.load(path)
        return cls(
            data["sdf"],
            data["color_view"],
            data["color_flat"],
            float(data["sharpness"]),
            int(data["dir_octaves"]),
        )


def sdf_query(field: Field, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear SDF value and analytic spatial gradient at points (N, 3)."""
    x = np.atleast_2d(x)
    return kernels.tri_gather_grad(field.sdf, x)


def ray_cube_intersect(o: np.ndarray, d: np.ndarray):
    """Slab intersection with [-1, 1]^3; returns (t_near, t_far, hit mask)."""
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (DOMAIN_LO - o) / d
        t1 = (DOMAIN_HI - o) / d
    # Parallel rays: component plays no role unless the origin is outside
    # the slab, in which case there is no hit on that axis.
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    inside = (o >= DOMAIN_LO) & (o <= DOMAIN_HI)
    parallel = d == 0.0
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    hit = t_far > t_near
    return t_near, t_far, hit


def stratified_depths(t_near, t_far, k: int, rng: np.random.Generator | None):
    """K depths per ray, one per uniform bin; midpoints when rng is None."""
    t_near = np.atleast_1d(np.asarray(t_near, dtype=float))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=float))
    b = t_near.shape[0]
    if rng is None:
        jitter = np.full((b, k), 0.5)
    else:
        jitter = rng.uniform(size=(b, k))
    edges = np.arange(k)[None, :] + jitter
    return t_near[:, None] + (t_far - t_near)[:, None] * edges / k


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def render_batch(field: Field, o: np.ndarray, d: np.ndarray, t: np.ndarray) -> dict:
    """Forward volume rendering for B rays with K plan depths each.

    Returns every intermediate the backward pass needs; see
    autodiff for the adjoint. Keys: p (B,K,3), f, phi (B,K), alpha, trans,
    weights (B,K-1), raw/clipped colors for both heads, rendered colors.
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    b, k = t.shape
    p = o[:, None, :] + t[..., None] * d[:, None, :]
    f = kernels.tri_gather(field.sdf, p.reshape(-1, 3)).reshape(b, k)
    phi = _sigmoid(field.sharpness * f)
    ratio = phi[:, 1:] / phi[:, :-1]
    alpha = np.maximum(1.0 - ratio, 0.0)
    trans = np.cumprod(
        np.concatenate([np.ones((b, 1)), 1.0 - alpha[:, :-1]], axis=1), axis=1
    )
    weights = trans * alpha

    pc = p[:, : k - 1].reshape(-1, 3)
    feats = kernels.tri_gather_vec(field.color_view, pc)
    n_feat = dir_feature_count(field.dir_octaves)
    gamma = dir_features(d, field.dir_octaves)
    gamma_rep = np.repeat(gamma, k - 1, axis=0)
    coef = feats[:, 3:].reshape(-1, 3, n_feat)
    raw_view = feats[:, :3] + np.einsum("ncf,nf->nc", coef, gamma_rep)
    col_view = np.clip(raw_view, 0.0, 1.0).reshape(b, k - 1, 3)
    raw_flat = kernels.tri_gather_vec(field.color_flat, pc)
    col_flat = np.clip(raw_flat, 0.0, 1.0).reshape(b, k - 1, 3)

    rendered_view = np.einsum("bk,bkc->bc", weights, col_view)
    rendered_flat = np.einsum("bk,bkc->bc", weights, col_flat)
    return {
        "o": o,
        "d": d,
        "t": t,
        "p": p,
        "f": f,
        "phi": phi,
        "ratio": ratio,
        "alpha": alpha,
        "trans": trans,
        "weights": weights,
        "gamma": gamma,
        "coef": coef,
        "raw_view": raw_view,
        "raw_flat": raw_flat,
        "col_view": col_view,
        "col_flat": col_flat,
        "rendered_view": rendered_view,
        "rendered_flat": rendered_flat,
    }


def render_ray(
    field: Field,
    origin: np.ndarray,
    direction: np.ndarray,
    k: int,
    use_view_dir: bool,
    rng: np.random.Generator | None = None,
):
    """Render one ray; returns (color, weights, depths).

    Stratified sampling over the cube-intersection interval (midpoints when
    rng is None). Raises NoIntersection if the ray misses the cube.
    """
    if k < 8:
        raise ValueError(f"need at least 8 samples per ray, got {k}")
    t_near, t_far, hit = ray_cube_intersect(origin, direction)
    if not hit[0]:
        raise NoIntersection("ray does not intersect the unit cube")
    t = stratified_depths(t_near, t_far, k, rng)
    out = render_batch(field, origin, direction, t)
    color = out["rendered_view" if use_view_dir else "rendered_flat"][0]
    return color, out["weights"][0], t[0]


class PsnrTracker:
    """Per-image EWMA of the squared rendering error, one slot per head.

    The first update sets the slot directly to the batch mean; later updates
    apply slot <- decay * slot + (1 - decay) * mean.
    """

    HEADS = ("view", "flat")
    PSNR_CAP_DB = 100.0

    def __init__(self, decay: float = 0.95):
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must be in (0, 1)")
        self.decay = decay
        self._mse: dict[str, dict[int, float]] = {h: {} for h in self.HEADS}

    def update(self, image_id: int, sq_errors: np.ndarray, head: str) -> None:
        batch_mean = float(np.mean(sq_errors))
        slots = self._mse[head]
        if image_id in slots:
            slots[image_id] = self.decay * slots[image_id] + (1.0 - self.decay) * batch_mean
        else:
            slots[image_id] = batch_mean

    def mse(self, image_id: int, head: str) -> float:
        return self._mse[head][image_id]

    def reset(self, image_id: int) -> None:
        for slots in self._mse.values():
            slots.pop(image_id, None)

    def has(self, image_id: int, head: str) -> bool:
        return image_id in self._mse[head]

    def psnr(self, image_id: int, head: str) -> float:
        mse = self._mse[head][image_id]
        if mse <= 0.0:
            return self.PSNR_CAP_DB
        return min(-10.0 * np.log10(mse), self.PSNR_CAP_DB)

    def state(self) -> dict:
        return {h: dict(v) for h, v in self._mse.items()}

    def load_state(self, state: dict) -> None:
        self._mse = {h: {int(k): float(v) for k, v in state[h].items()} for h in self.HEADS}


def extract_mesh(field: Field, resolution: int):
    """Marching-cubes triangulation of the SDF zero level set.

    Returns (vertices (V, 3) world coordinates, faces (F, 3) vertex indices).
    Raises EmptyLevelSet when the sampled grid has no sign change.
    """
    from skimage import measure

    axis = np.linspace(DOMAIN_LO, DOMAIN_HI, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vol = kernels.tri_gather(field.sdf, pts).reshape(resolution, resolution, resolution)
    if vol.min() >= 0.0 or vol.max() <= 0.0:
        raise EmptyLevelSet("SDF has no zero crossing at this resolution")
    h = (DOMAIN_HI - DOMAIN_LO) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(h, h, h))
    return verts + DOMAIN_LO, faces.astype(np.int64)


def write_ply(path, verts: np.ndarray, faces: np.ndarray) -> None:
    """ASCII PLY with float vertices and triangular faces."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(verts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(faces)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for v in verts:
            fh.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")


def read_ply(path):
    """Reader for the ASCII PLY subset written by write_ply."""
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        n_verts = n_faces = 0
        while True:
            line = fh.readline().strip()
            if line == "end_header":
                break
            if line.startswith("element vertex"):
                n_verts = int(line.split()[2])
            elif line.startswith("element face"):
                n_faces = int(line.split()[2])
        verts = np.array(
            [[float(v) for v in fh.readline().split()] for _ in range(n_verts)]
        )
        faces = np.array(
            [[int(v) for v in fh.readline().split()[1:4]] for _ in range(n_faces)],
            dtype=np.int64,
        )
    return verts, faces
