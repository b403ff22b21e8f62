"""Numpy fallback kernels.

These mirror the Cython extension in `_ext.pyx` operation-for-operation:
float64 accumulation with a fixed association order, so both engines produce
bit-identical float32 outputs. Any change here must be made in both files.
"""

from __future__ import annotations

import numpy as np


def _axis_coords(n_in: int, n_out: int):
    # align-corners-false: output center i maps to (i+0.5)*(in/out)-0.5,
    # clamped to the valid input range.
    scale = n_in / n_out
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    np.clip(x, 0.0, float(n_in - 1), out=x)
    i0 = np.floor(x).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = x - i0
    return i0, i1, f


def resize_trilinear(src: np.ndarray, out_dims) -> np.ndarray:
    """Resample a (X,Y,Z) float32 volume to out_dims by trilinear interpolation."""
    ox, oy, oz = (int(d) for d in out_dims)
    nx, ny, nz = src.shape
    x0, x1, fx = _axis_coords(nx, ox)
    y0, y1, fy = _axis_coords(ny, oy)
    z0, z1, fz = _axis_coords(nz, oz)
    s = np.ascontiguousarray(src, dtype=np.float64)

    wx0, wx1 = 1.0 - fx, fx
    wy0, wy1 = 1.0 - fy, fy
    wz0, wz1 = 1.0 - fz, fz

    def w(wx, wy, wz):
        return (wx[:, None, None] * wy[None, :, None]) * wz[None, None, :]

    def c(ix, iy, iz):
        return s[np.ix_(ix, iy, iz)]

    acc = w(wx0, wy0, wz0) * c(x0, y0, z0)
    acc = acc + w(wx1, wy0, wz0) * c(x1, y0, z0)
    acc = acc + w(wx0, wy1, wz0) * c(x0, y1, z0)
    acc = acc + w(wx1, wy1, wz0) * c(x1, y1, z0)
    acc = acc + w(wx0, wy0, wz1) * c(x0, y0, z1)
    acc = acc + w(wx1, wy0, wz1) * c(x1, y0, z1)
    acc = acc + w(wx0, wy1, wz1) * c(x0, y1, z1)
    acc = acc + w(wx1, wy1, wz1) * c(x1, y1, z1)
    return acc.astype(np.float32)


def gather_patches(vol: np.ndarray, edge: int, grid_dims, retained: np.ndarray) -> np.ndarray:
    """Extract retained r-cubes from a padded (Gx*r, Gy*r, Gz*r) volume.

    Cell k of the flat grid is (gx, gy, gz) with gx fastest; row layout inside
    each cube is x-fastest as well.
    """
    gx, gy, gz = (int(d) for d in grid_dims)
    r = int(edge)
    cells = (
        vol.reshape(gx, r, gy, r, gz, r)
        .transpose(4, 2, 0, 5, 3, 1)
        .reshape(gx * gy * gz, r**3)
    )
    return np.ascontiguousarray(cells[np.asarray(retained, dtype=np.int64)])


def scatter_patches(rows: np.ndarray, edge: int, grid_dims, retained: np.ndarray) -> np.ndarray:
    """Inverse of gather_patches; non-retained cells are zero-filled."""
    gx, gy, gz = (int(d) for d in grid_dims)
    r = int(edge)
    cells = np.zeros((gx * gy * gz, r**3), dtype=np.float32)
    cells[np.asarray(retained, dtype=np.int64)] = rows
    vol = (
        cells.reshape(gz, gy, gx, r, r, r)
        .transpose(2, 5, 1, 4, 0, 3)
        .reshape(gx * r, gy * r, gz * r)
    )
    return np.ascontiguousarray(vol)
