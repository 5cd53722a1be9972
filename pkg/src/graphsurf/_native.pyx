# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled trilinear grid kernels.

Same contracts as graphsurf._kernels_numpy (the import-time fallback): grids
are node-based over [-1, 1]^3, out-of-cube queries reuse the nearest
boundary cell with unclamped fractional coordinates (linear extrapolation).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

DOMAIN_LO = -1.0
DOMAIN_HI = 1.0

cdef double _LO = -1.0
cdef double _HI = 1.0


cdef inline void _cell(double[:, ::1] pts, Py_ssize_t n, int res, double h,
                       Py_ssize_t* cx, Py_ssize_t* cy, Py_ssize_t* cz,
                       double* ax, double* ay, double* az) nogil:
    cdef double ux = (pts[n, 0] - _LO) / h
    cdef double uy = (pts[n, 1] - _LO) / h
    cdef double uz = (pts[n, 2] - _LO) / h
    cdef Py_ssize_t ix = <Py_ssize_t>ux if ux >= 0 else <Py_ssize_t>ux - 1
    cdef Py_ssize_t iy = <Py_ssize_t>uy if uy >= 0 else <Py_ssize_t>uy - 1
    cdef Py_ssize_t iz = <Py_ssize_t>uz if uz >= 0 else <Py_ssize_t>uz - 1
    if ix < 0: ix = 0
    if ix > res - 2: ix = res - 2
    if iy < 0: iy = 0
    if iy > res - 2: iy = res - 2
    if iz < 0: iz = 0
    if iz > res - 2: iz = res - 2
    cx[0] = ix
    cy[0] = iy
    cz[0] = iz
    ax[0] = ux - ix
    ay[0] = uy - iy
    az[0] = uz - iz


def tri_gather(double[:, :, ::1] grid, double[:, ::1] pts):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>grid.shape[0]
    cdef double h = (_HI - _LO) / (res - 1)
    out_arr = np.zeros(n_pts)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t n, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0
    with nogil:
        for n in range(n_pts):
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            out[n] = (
                wx0 * (wy0 * (wz0 * grid[ix, iy, iz] + az * grid[ix, iy, iz + 1])
                       + ay * (wz0 * grid[ix, iy + 1, iz] + az * grid[ix, iy + 1, iz + 1]))
                + ax * (wy0 * (wz0 * grid[ix + 1, iy, iz] + az * grid[ix + 1, iy, iz + 1])
                        + ay * (wz0 * grid[ix + 1, iy + 1, iz] + az * grid[ix + 1, iy + 1, iz + 1]))
            )
    return out_arr


def tri_gather_grad(double[:, :, ::1] grid, double[:, ::1] pts):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>grid.shape[0]
    cdef double h = (_HI - _LO) / (res - 1)
    vals_arr = np.zeros(n_pts)
    grads_arr = np.zeros((n_pts, 3))
    cdef double[::1] vals = vals_arr
    cdef double[:, ::1] grads = grads_arr
    cdef Py_ssize_t n, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0
    cdef double g000, g001, g010, g011, g100, g101, g110, g111
    with nogil:
        for n in range(n_pts):
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            g000 = grid[ix, iy, iz]
            g001 = grid[ix, iy, iz + 1]
            g010 = grid[ix, iy + 1, iz]
            g011 = grid[ix, iy + 1, iz + 1]
            g100 = grid[ix + 1, iy, iz]
            g101 = grid[ix + 1, iy, iz + 1]
            g110 = grid[ix + 1, iy + 1, iz]
            g111 = grid[ix + 1, iy + 1, iz + 1]
            vals[n] = (
                wx0 * (wy0 * (wz0 * g000 + az * g001) + ay * (wz0 * g010 + az * g011))
                + ax * (wy0 * (wz0 * g100 + az * g101) + ay * (wz0 * g110 + az * g111))
            )
            grads[n, 0] = (
                wy0 * (wz0 * (g100 - g000) + az * (g101 - g001))
                + ay * (wz0 * (g110 - g010) + az * (g111 - g011))
            ) / h
            grads[n, 1] = (
                wx0 * (wz0 * (g010 - g000) + az * (g011 - g001))
                + ax * (wz0 * (g110 - g100) + az * (g111 - g101))
            ) / h
            grads[n, 2] = (
                wx0 * (wy0 * (g001 - g000) + ay * (g011 - g010))
                + ax * (wy0 * (g101 - g100) + ay * (g111 - g110))
            ) / h
    return vals_arr, grads_arr


def tri_gather_vec(double[:, :, :, ::1] grid, double[:, ::1] pts):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>grid.shape[0]
    cdef Py_ssize_t n_ch = grid.shape[3]
    cdef double h = (_HI - _LO) / (res - 1)
    out_arr = np.zeros((n_pts, n_ch))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0
    cdef double w000, w001, w010, w011, w100, w101, w110, w111
    with nogil:
        for n in range(n_pts):
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            w000 = wx0 * wy0 * wz0
            w001 = wx0 * wy0 * az
            w010 = wx0 * ay * wz0
            w011 = wx0 * ay * az
            w100 = ax * wy0 * wz0
            w101 = ax * wy0 * az
            w110 = ax * ay * wz0
            w111 = ax * ay * az
            for c in range(n_ch):
                out[n, c] = (
                    w000 * grid[ix, iy, iz, c] + w001 * grid[ix, iy, iz + 1, c]
                    + w010 * grid[ix, iy + 1, iz, c] + w011 * grid[ix, iy + 1, iz + 1, c]
                    + w100 * grid[ix + 1, iy, iz, c] + w101 * grid[ix + 1, iy, iz + 1, c]
                    + w110 * grid[ix + 1, iy + 1, iz, c] + w111 * grid[ix + 1, iy + 1, iz + 1, c]
                )
    return out_arr


def tri_vjp_grid(double[:, :, ::1] gbuf, double[:, ::1] pts, double[::1] up):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>gbuf.shape[0]
    cdef double h = (_HI - _LO) / (res - 1)
    cdef Py_ssize_t n, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0, u
    with nogil:
        for n in range(n_pts):
            u = up[n]
            if u == 0.0:
                continue
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            gbuf[ix, iy, iz] += u * wx0 * wy0 * wz0
            gbuf[ix, iy, iz + 1] += u * wx0 * wy0 * az
            gbuf[ix, iy + 1, iz] += u * wx0 * ay * wz0
            gbuf[ix, iy + 1, iz + 1] += u * wx0 * ay * az
            gbuf[ix + 1, iy, iz] += u * ax * wy0 * wz0
            gbuf[ix + 1, iy, iz + 1] += u * ax * wy0 * az
            gbuf[ix + 1, iy + 1, iz] += u * ax * ay * wz0
            gbuf[ix + 1, iy + 1, iz + 1] += u * ax * ay * az


def tri_vjp_grid_vec(double[:, :, :, ::1] gbuf, double[:, ::1] pts, double[:, ::1] up):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>gbuf.shape[0]
    cdef Py_ssize_t n_ch = gbuf.shape[3]
    cdef double h = (_HI - _LO) / (res - 1)
    cdef Py_ssize_t n, c, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0, u
    cdef double w000, w001, w010, w011, w100, w101, w110, w111
    with nogil:
        for n in range(n_pts):
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            w000 = wx0 * wy0 * wz0
            w001 = wx0 * wy0 * az
            w010 = wx0 * ay * wz0
            w011 = wx0 * ay * az
            w100 = ax * wy0 * wz0
            w101 = ax * wy0 * az
            w110 = ax * ay * wz0
            w111 = ax * ay * az
            for c in range(n_ch):
                u = up[n, c]
                if u == 0.0:
                    continue
                gbuf[ix, iy, iz, c] += u * w000
                gbuf[ix, iy, iz + 1, c] += u * w001
                gbuf[ix, iy + 1, iz, c] += u * w010
                gbuf[ix, iy + 1, iz + 1, c] += u * w011
                gbuf[ix + 1, iy, iz, c] += u * w100
                gbuf[ix + 1, iy, iz + 1, c] += u * w101
                gbuf[ix + 1, iy + 1, iz, c] += u * w110
                gbuf[ix + 1, iy + 1, iz + 1, c] += u * w111


def tri_vjp_pos_vec(double[:, :, :, ::1] grid, double[:, ::1] pts, double[:, ::1] up):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>grid.shape[0]
    cdef Py_ssize_t n_ch = grid.shape[3]
    cdef double h = (_HI - _LO) / (res - 1)
    out_arr = np.zeros((n_pts, 3))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n, c, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0, u
    cdef double gx, gy, gz
    cdef double g000, g001, g010, g011, g100, g101, g110, g111
    with nogil:
        for n in range(n_pts):
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            gx = 0.0
            gy = 0.0
            gz = 0.0
            for c in range(n_ch):
                u = up[n, c]
                if u == 0.0:
                    continue
                g000 = grid[ix, iy, iz, c]
                g001 = grid[ix, iy, iz + 1, c]
                g010 = grid[ix, iy + 1, iz, c]
                g011 = grid[ix, iy + 1, iz + 1, c]
                g100 = grid[ix + 1, iy, iz, c]
                g101 = grid[ix + 1, iy, iz + 1, c]
                g110 = grid[ix + 1, iy + 1, iz, c]
                g111 = grid[ix + 1, iy + 1, iz + 1, c]
                gx += u * (wy0 * (wz0 * (g100 - g000) + az * (g101 - g001))
                           + ay * (wz0 * (g110 - g010) + az * (g111 - g011)))
                gy += u * (wx0 * (wz0 * (g010 - g000) + az * (g011 - g001))
                           + ax * (wz0 * (g110 - g100) + az * (g111 - g101)))
                gz += u * (wx0 * (wy0 * (g001 - g000) + ay * (g011 - g010))
                           + ax * (wy0 * (g101 - g100) + ay * (g111 - g110)))
            out[n, 0] = gx / h
            out[n, 1] = gy / h
            out[n, 2] = gz / h
    return out_arr


def tri_vjp_grid_from_spatial(double[:, :, ::1] gbuf, double[:, ::1] pts, double[:, ::1] up3):
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef int res = <int>gbuf.shape[0]
    cdef double h = (_HI - _LO) / (res - 1)
    cdef Py_ssize_t n, ix, iy, iz
    cdef double ax, ay, az, wx0, wy0, wz0, ux, uy, uz
    with nogil:
        for n in range(n_pts):
            ux = up3[n, 0] / h
            uy = up3[n, 1] / h
            uz = up3[n, 2] / h
            if ux == 0.0 and uy == 0.0 and uz == 0.0:
                continue
            _cell(pts, n, res, h, &ix, &iy, &iz, &ax, &ay, &az)
            wx0 = 1.0 - ax
            wy0 = 1.0 - ay
            wz0 = 1.0 - az
            # d(grad_x)/d(node) = sign_x * wy * wz / h, and likewise y, z
            gbuf[ix, iy, iz] += -ux * wy0 * wz0 - uy * wx0 * wz0 - uz * wx0 * wy0
            gbuf[ix, iy, iz + 1] += -ux * wy0 * az - uy * wx0 * az + uz * wx0 * wy0
            gbuf[ix, iy + 1, iz] += -ux * ay * wz0 + uy * wx0 * wz0 - uz * wx0 * ay
            gbuf[ix, iy + 1, iz + 1] += -ux * ay * az + uy * wx0 * az + uz * wx0 * ay
            gbuf[ix + 1, iy, iz] += ux * wy0 * wz0 - uy * ax * wz0 - uz * ax * wy0
            gbuf[ix + 1, iy, iz + 1] += ux * wy0 * az - uy * ax * az + uz * ax * wy0
            gbuf[ix + 1, iy + 1, iz] += ux * ay * wz0 + uy * ax * wz0 - uz * ax * ay
            gbuf[ix + 1, iy + 1, iz + 1] += ux * ay * az + uy * ax * az + uz * ax * ay
