# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython kernel core.

Must stay bit-identical to the numpy fallback in `_py.py`: same float64
association order, same clamping, same final float32 cast.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef void _axis_coords(Py_ssize_t n_in, Py_ssize_t n_out,
                       Py_ssize_t[::1] i0, Py_ssize_t[::1] i1,
                       double[::1] f) nogil:
    cdef double scale = <double>n_in / <double>n_out
    cdef double hi = <double>(n_in - 1)
    cdef double x
    cdef Py_ssize_t i, lo
    for i in range(n_out):
        x = (<double>i + 0.5) * scale - 0.5
        if x < 0.0:
            x = 0.0
        elif x > hi:
            x = hi
        lo = <Py_ssize_t>floor(x)
        i0[i] = lo
        i1[i] = lo + 1 if lo + 1 < n_in else n_in - 1
        f[i] = x - <double>lo


def resize_trilinear(src, out_dims):
    """Resample a (X,Y,Z) float32 volume to out_dims by trilinear interpolation."""
    cdef float[:, :, ::1] s = np.ascontiguousarray(src, dtype=np.float32)
    cdef Py_ssize_t nx = s.shape[0], ny = s.shape[1], nz = s.shape[2]
    cdef Py_ssize_t ox = int(out_dims[0]), oy = int(out_dims[1]), oz = int(out_dims[2])

    x0a = np.empty(ox, dtype=np.intp); x1a = np.empty(ox, dtype=np.intp)
    y0a = np.empty(oy, dtype=np.intp); y1a = np.empty(oy, dtype=np.intp)
    z0a = np.empty(oz, dtype=np.intp); z1a = np.empty(oz, dtype=np.intp)
    fxa = np.empty(ox, dtype=np.float64)
    fya = np.empty(oy, dtype=np.float64)
    fza = np.empty(oz, dtype=np.float64)

    cdef Py_ssize_t[::1] x0 = x0a, x1 = x1a, y0 = y0a, y1 = y1a, z0 = z0a, z1 = z1a
    cdef double[::1] fx = fxa, fy = fya, fz = fza
    _axis_coords(nx, ox, x0, x1, fx)
    _axis_coords(ny, oy, y0, y1, fy)
    _axis_coords(nz, oz, z0, z1, fz)

    out_arr = np.empty((ox, oy, oz), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k, a0, a1, b0, b1, c0, c1
    cdef double wx0, wx1, wy0, wy1, wz0, wz1, v
    with nogil:
        for i in range(ox):
            a0 = x0[i]; a1 = x1[i]
            wx1 = fx[i]; wx0 = 1.0 - wx1
            for j in range(oy):
                b0 = y0[j]; b1 = y1[j]
                wy1 = fy[j]; wy0 = 1.0 - wy1
                for k in range(oz):
                    c0 = z0[k]; c1 = z1[k]
                    wz1 = fz[k]; wz0 = 1.0 - wz1
                    v = ((wx0 * wy0) * wz0) * <double>s[a0, b0, c0]
                    v = v + ((wx1 * wy0) * wz0) * <double>s[a1, b0, c0]
                    v = v + ((wx0 * wy1) * wz0) * <double>s[a0, b1, c0]
                    v = v + ((wx1 * wy1) * wz0) * <double>s[a1, b1, c0]
                    v = v + ((wx0 * wy0) * wz1) * <double>s[a0, b0, c1]
                    v = v + ((wx1 * wy0) * wz1) * <double>s[a1, b0, c1]
                    v = v + ((wx0 * wy1) * wz1) * <double>s[a0, b1, c1]
                    v = v + ((wx1 * wy1) * wz1) * <double>s[a1, b1, c1]
                    out[i, j, k] = <float>v
    return out_arr


def gather_patches(vol, edge, grid_dims, retained):
    """Extract retained r-cubes from a padded volume, x-fastest inside each cube."""
    cdef float[:, :, ::1] v = np.ascontiguousarray(vol, dtype=np.float32)
    cdef Py_ssize_t r = int(edge)
    cdef Py_ssize_t gx = int(grid_dims[0]), gy = int(grid_dims[1]), gz = int(grid_dims[2])
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(retained, dtype=np.int64)
    cdef Py_ssize_t n = idx.shape[0]
    out_arr = np.empty((n, r * r * r), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t k, cell, cx, cy, cz, dx, dy, dz, col
    with nogil:
        for k in range(n):
            cell = idx[k]
            cx = cell % gx
            cy = (cell // gx) % gy
            cz = cell // (gx * gy)
            col = 0
            for dz in range(r):
                for dy in range(r):
                    for dx in range(r):
                        out[k, col] = v[cx * r + dx, cy * r + dy, cz * r + dz]
                        col += 1
    return out_arr


def scatter_patches(rows, edge, grid_dims, retained):
    """Inverse of gather_patches; non-retained cells are zero-filled."""
    cdef float[:, ::1] src = np.ascontiguousarray(rows, dtype=np.float32)
    cdef Py_ssize_t r = int(edge)
    cdef Py_ssize_t gx = int(grid_dims[0]), gy = int(grid_dims[1]), gz = int(grid_dims[2])
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(retained, dtype=np.int64)
    cdef Py_ssize_t n = idx.shape[0]
    out_arr = np.zeros((gx * r, gy * r, gz * r), dtype=np.float32)
    cdef float[:, :, ::1] out = out_arr
    cdef Py_ssize_t k, cell, cx, cy, cz, dx, dy, dz, col
    with nogil:
        for k in range(n):
            cell = idx[k]
            cx = cell % gx
            cy = (cell // gx) % gy
            cz = cell // (gx * gy)
            col = 0
            for dz in range(r):
                for dy in range(r):
                    for dx in range(r):
                        out[cx * r + dx, cy * r + dy, cz * r + dz] = src[k, col]
                        col += 1
    return out_arr
