import math

import numpy as np
import pytest

from voxelbridge import _kernels


def oracle_resize(src, out_dims):
    """Direct per-voxel 8-corner trilinear formula, written independently of
    the production kernels (different accumulation grouping on purpose)."""
    nx, ny, nz = src.shape
    ox, oy, oz = out_dims
    out = np.zeros(out_dims, dtype=np.float64)
    for i in range(ox):
        x = min(max((i + 0.5) * nx / ox - 0.5, 0.0), nx - 1.0)
        x0 = int(math.floor(x))
        x1 = min(x0 + 1, nx - 1)
        fx = x - x0
        for j in range(oy):
            y = min(max((j + 0.5) * ny / oy - 0.5, 0.0), ny - 1.0)
            y0 = int(math.floor(y))
            y1 = min(y0 + 1, ny - 1)
            fy = y - y0
            for k in range(oz):
                z = min(max((k + 0.5) * nz / oz - 0.5, 0.0), nz - 1.0)
                z0 = int(math.floor(z))
                z1 = min(z0 + 1, nz - 1)
                fz = z - z0
                # interpolate along x, then y, then z
                c00 = src[x0, y0, z0] * (1 - fx) + src[x1, y0, z0] * fx
                c10 = src[x0, y1, z0] * (1 - fx) + src[x1, y1, z0] * fx
                c01 = src[x0, y0, z1] * (1 - fx) + src[x1, y0, z1] * fx
                c11 = src[x0, y1, z1] * (1 - fx) + src[x1, y1, z1] * fx
                c0 = c00 * (1 - fy) + c10 * fy
                c1 = c01 * (1 - fy) + c11 * fy
                out[i, j, k] = c0 * (1 - fz) + c1 * fz
    return out


def test_resize_matches_direct_formula_oracle(rng):
    src = rng.random((8, 9, 7)).astype(np.float32)
    got = _kernels.resize_trilinear(src, (16, 18, 14))
    want = oracle_resize(src.astype(np.float64), (16, 18, 14))
    assert np.max(np.abs(got.astype(np.float64) - want)) < 1e-6


def test_resize_identity_dims_exact(rng):
    src = rng.standard_normal((5, 6, 4)).astype(np.float32)
    out = _kernels.resize_trilinear(src, (5, 6, 4))
    assert np.array_equal(out, src)


def test_resize_constant_field_exact():
    src = np.full((4, 5, 6), 3.5, dtype=np.float32)
    out = _kernels.resize_trilinear(src, (9, 3, 11))
    assert np.array_equal(out, np.full((9, 3, 11), 3.5, dtype=np.float32))


def test_resize_range_contained(rng):
    src = rng.standard_normal((7, 8, 9)).astype(np.float32)
    out = _kernels.resize_trilinear(src, (13, 5, 17))
    assert out.min() >= src.min() - 1e-6
    assert out.max() <= src.max() + 1e-6


def test_resize_is_linear(rng):
    v1 = rng.standard_normal((6, 7, 5)).astype(np.float32)
    v2 = rng.standard_normal((6, 7, 5)).astype(np.float32)
    a, b = 0.7, -1.3
    combo = _kernels.resize_trilinear((a * v1 + b * v2).astype(np.float32), (11, 9, 8))
    parts = a * _kernels.resize_trilinear(v1, (11, 9, 8)) + b * _kernels.resize_trilinear(
        v2, (11, 9, 8)
    )
    assert np.max(np.abs(combo - parts)) < 1e-5


def test_gather_scatter_roundtrip(rng):
    vol = rng.standard_normal((12, 8, 8)).astype(np.float32)
    retained = np.array([0, 2, 5, 11], dtype=np.int64)
    rows = _kernels.gather_patches(vol, 4, (3, 2, 2), retained)
    assert rows.shape == (4, 64)
    back = _kernels.scatter_patches(rows, 4, (3, 2, 2), retained)
    rows2 = _kernels.gather_patches(back, 4, (3, 2, 2), retained)
    assert np.array_equal(rows, rows2)


def test_gather_row_order_is_x_fastest():
    # vol[x, y, z] = x + 10*y + 100*z over one 2^3 cell
    x, y, z = np.meshgrid(np.arange(2), np.arange(2), np.arange(2), indexing="ij")
    vol = (x + 10 * y + 100 * z).astype(np.float32)
    rows = _kernels.gather_patches(vol, 2, (1, 1, 1), np.array([0], dtype=np.int64))
    assert rows[0].tolist() == [0, 1, 10, 11, 100, 101, 110, 111]


def test_grid_cell_flattening_is_x_fastest():
    # 2x1x1 grid of 1-voxel cells: cell 0 is x=0, cell 1 is x=1
    vol = np.array([[[5.0]], [[9.0]]], dtype=np.float32)
    rows = _kernels.gather_patches(vol, 1, (2, 1, 1), np.array([0, 1], dtype=np.int64))
    assert rows.ravel().tolist() == [5.0, 9.0]


@pytest.mark.skipif("ext" not in _kernels.engines(), reason="compiled core not built")
def test_engines_bit_identical(rng):
    eng = _kernels.engines()
    src = rng.standard_normal((9, 11, 6)).astype(np.float32)
    a = eng["py"].resize_trilinear(src, (20, 7, 13))
    b = eng["ext"].resize_trilinear(src, (20, 7, 13))
    assert a.tobytes() == b.tobytes()

    vol = rng.standard_normal((6, 6, 9)).astype(np.float32)
    retained = np.array([1, 3, 4], dtype=np.int64)
    ga = eng["py"].gather_patches(vol, 3, (2, 2, 3), retained)
    gb = eng["ext"].gather_patches(vol, 3, (2, 2, 3), retained)
    assert ga.tobytes() == gb.tobytes()
    sa = eng["py"].scatter_patches(ga, 3, (2, 2, 3), retained)
    sb = eng["ext"].scatter_patches(gb, 3, (2, 2, 3), retained)
    assert sa.tobytes() == sb.tobytes()
