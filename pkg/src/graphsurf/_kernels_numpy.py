"""Numpy fallback for the trilinear grid kernels.

Grids are node-based over the cube [-1, 1]^3 with R nodes per axis (cell
size 2 / (R - 1)). Queries outside the cube reuse the nearest boundary cell
with unclamped fractional coordinates, i.e. the interpolant extrapolates
linearly, which keeps it smooth across the cube faces.

The compiled backend in ``_native.pyx`` implements the same contracts; the
two are interchangeable up to floating-point summation order.
"""

from __future__ import annotations

import numpy as np

DOMAIN_LO = -1.0
DOMAIN_HI = 1.0

_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def _cells(res: int, pts: np.ndarray):
    """Cell indices and fractional offsets for query points (N, 3)."""
    h = (DOMAIN_HI - DOMAIN_LO) / (res - 1)
    u = (pts - DOMAIN_LO) / h
    c = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    a = u - c
    return c, a, h


def _corner_weight(a: np.ndarray, corner) -> np.ndarray:
    w = np.ones(a.shape[0])
    for axis, d in enumerate(corner):
        w = w * (a[:, axis] if d else 1.0 - a[:, axis])
    return w


def tri_gather(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Interpolated values of a scalar grid (R, R, R) at points (N, 3)."""
    c, a, _ = _cells(grid.shape[0], pts)
    out = np.zeros(pts.shape[0])
    for corner in _CORNERS:
        idx = (c[:, 0] + corner[0], c[:, 1] + corner[1], c[:, 2] + corner[2])
        out += _corner_weight(a, corner) * grid[idx]
    return out


def tri_gather_grad(grid: np.ndarray, pts: np.ndarray):
    """Values and analytic spatial gradients (N, 3) of the interpolant."""
    c, a, h = _cells(grid.shape[0], pts)
    vals = np.zeros(pts.shape[0])
    grads = np.zeros((pts.shape[0], 3))
    wx = [1.0 - a[:, 0], a[:, 0]]
    wy = [1.0 - a[:, 1], a[:, 1]]
    wz = [1.0 - a[:, 2], a[:, 2]]
    for dx, dy, dz in _CORNERS:
        g = grid[c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz]
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        vals += wx[dx] * wy[dy] * wz[dz] * g
        grads[:, 0] += sx * wy[dy] * wz[dz] * g
        grads[:, 1] += wx[dx] * sy * wz[dz] * g
        grads[:, 2] += wx[dx] * wy[dy] * sz * g
    grads /= h
    return vals, grads


def tri_gather_vec(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Interpolated values of a vector grid (R, R, R, C) at points (N, 3)."""
    c, a, _ = _cells(grid.shape[0], pts)
    out = np.zeros((pts.shape[0], grid.shape[3]))
    for corner in _CORNERS:
        idx = (c[:, 0] + corner[0], c[:, 1] + corner[1], c[:, 2] + corner[2])
        out += _corner_weight(a, corner)[:, None] * grid[idx]
    return out


def tri_vjp_grid(gbuf: np.ndarray, pts: np.ndarray, up: np.ndarray) -> None:
    """Accumulate d(sum(up * gather(grid, pts)))/dgrid into gbuf in place."""
    c, a, _ = _cells(gbuf.shape[0], pts)
    for corner in _CORNERS:
        idx = (c[:, 0] + corner[0], c[:, 1] + corner[1], c[:, 2] + corner[2])
        np.add.at(gbuf, idx, _corner_weight(a, corner) * up)


def tri_vjp_grid_vec(gbuf: np.ndarray, pts: np.ndarray, up: np.ndarray) -> None:
    """Vector-grid analogue of tri_vjp_grid; up has shape (N, C)."""
    c, a, _ = _cells(gbuf.shape[0], pts)
    for corner in _CORNERS:
        idx = (c[:, 0] + corner[0], c[:, 1] + corner[1], c[:, 2] + corner[2])
        np.add.at(gbuf, idx, _corner_weight(a, corner)[:, None] * up)


def tri_vjp_pos_vec(grid: np.ndarray, pts: np.ndarray, up: np.ndarray) -> np.ndarray:
    """d(sum(up * gather_vec(grid, pts)))/dpts, shape (N, 3)."""
    c, a, h = _cells(grid.shape[0], pts)
    out = np.zeros((pts.shape[0], 3))
    wx = [1.0 - a[:, 0], a[:, 0]]
    wy = [1.0 - a[:, 1], a[:, 1]]
    wz = [1.0 - a[:, 2], a[:, 2]]
    for dx, dy, dz in _CORNERS:
        g = grid[c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz]
        dot = np.einsum("nc,nc->n", up, g)
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        out[:, 0] += sx * wy[dy] * wz[dz] * dot
        out[:, 1] += wx[dx] * sy * wz[dz] * dot
        out[:, 2] += wx[dx] * wy[dy] * sz * dot
    out /= h
    return out


def tri_vjp_grid_from_spatial(gbuf: np.ndarray, pts: np.ndarray, up3: np.ndarray) -> None:
    """Adjoint of the spatial-gradient output of tri_gather_grad.

    Accumulates d(sum(up3 * grads))/dgrid into gbuf in place.
    """
    c, a, h = _cells(gbuf.shape[0], pts)
    wx = [1.0 - a[:, 0], a[:, 0]]
    wy = [1.0 - a[:, 1], a[:, 1]]
    wz = [1.0 - a[:, 2], a[:, 2]]
    for dx, dy, dz in _CORNERS:
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        sz = 1.0 if dz else -1.0
        contrib = (
            up3[:, 0] * sx * wy[dy] * wz[dz]
            + up3[:, 1] * wx[dx] * sy * wz[dz]
            + up3[:, 2] * wx[dx] * wy[dy] * sz
        ) / h
        idx = (c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz)
        np.add.at(gbuf, idx, contrib)
