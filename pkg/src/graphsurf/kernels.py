"""Trilinear grid kernels with backend selection at import.

The hot inner loops (grid gather/scatter and their adjoints) exist twice:
a compiled Cython extension (``graphsurf._native``) and a pure-numpy
fallback (``graphsurf._kernels_numpy``). The compiled backend is used when
available; set ``GRAPHSURF_BACKEND=numpy`` or ``=native`` to force one.

Both backends implement identical math; results agree to floating-point
summation order (see tests/test_kernels.py and benchmarks/bench_kernels.py).
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_numpy as _numpy_impl

DOMAIN_LO = _numpy_impl.DOMAIN_LO
DOMAIN_HI = _numpy_impl.DOMAIN_HI

_requested = os.environ.get("GRAPHSURF_BACKEND", "auto").lower()
if _requested not in ("auto", "native", "numpy"):
    raise ValueError(f"GRAPHSURF_BACKEND must be auto|native|numpy, got {_requested!r}")

_impl = _numpy_impl
BACKEND = "numpy"
if _requested in ("auto", "native"):
    try:
        from . import _native as _native_impl  # type: ignore[attr-defined]

        _impl = _native_impl
        BACKEND = "native"
    except ImportError:
        if _requested == "native":
            raise


def _pts(pts: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pts, dtype=np.float64)


def tri_gather(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return _impl.tri_gather(np.ascontiguousarray(grid), _pts(pts))


def tri_gather_grad(grid: np.ndarray, pts: np.ndarray):
    return _impl.tri_gather_grad(np.ascontiguousarray(grid), _pts(pts))


def tri_gather_vec(grid: np.ndarray, pts: np.ndarray) -> np.ndarray:
    return _impl.tri_gather_vec(np.ascontiguousarray(grid), _pts(pts))


def tri_vjp_grid(gbuf: np.ndarray, pts: np.ndarray, up: np.ndarray) -> None:
    _impl.tri_vjp_grid(gbuf, _pts(pts), np.ascontiguousarray(up, dtype=np.float64))


def tri_vjp_grid_vec(gbuf: np.ndarray, pts: np.ndarray, up: np.ndarray) -> None:
    _impl.tri_vjp_grid_vec(gbuf, _pts(pts), np.ascontiguousarray(up, dtype=np.float64))


def tri_vjp_pos_vec(grid: np.ndarray, pts: np.ndarray, up: np.ndarray) -> np.ndarray:
    return _impl.tri_vjp_pos_vec(
        np.ascontiguousarray(grid), _pts(pts), np.ascontiguousarray(up, dtype=np.float64)
    )


def tri_vjp_grid_from_spatial(gbuf: np.ndarray, pts: np.ndarray, up3: np.ndarray) -> None:
    _impl.tri_vjp_grid_from_spatial(
        gbuf, _pts(pts), np.ascontiguousarray(up3, dtype=np.float64)
    )
