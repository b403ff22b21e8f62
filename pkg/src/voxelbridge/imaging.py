"""Raster helpers: PPM (P6, 8-bit, bit-exact) and PNG I/O, resizing, and the
axial-slice montage used for heatmap figures.

Images travel as float arrays in [0, 1] with shape (H, W, 3), row 0 at the
top.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import _kernels
from .errors import FormatError, ValidationError


def to_uint8(img: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.rint(arr * 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else to_uint8(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"PPM needs an (H, W, 3) raster, got {arr.shape}")
    h, w = arr.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a P6 PPM file")
    # header: magic, dimensions, maxval; separated by whitespace, then one
    # whitespace byte before the binary payload
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P6" or maxval != 255:
        raise FormatError(f"{path}: unsupported PPM variant")
    payload = raw[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: truncated PPM payload")
    return from_uint8(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3))


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_image(path, img: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, img)
    else:
        write_ppm(path, img)


def read_image(path) -> np.ndarray:
    if str(path).lower().endswith(".png"):
        return read_png(path)
    return read_ppm(path)


def resize_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to (H, W) via the volumetric kernel (depth 1)."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = size
    if arr.ndim == 2:
        out = _kernels.resize_trilinear(
            np.ascontiguousarray(arr, dtype=np.float32)[:, :, None], (h, w, 1)
        )
        return out[:, :, 0].astype(np.float64)
    chans = [
        _kernels.resize_trilinear(
            np.ascontiguousarray(arr[:, :, c], dtype=np.float32)[:, :, None], (h, w, 1)
        )[:, :, 0]
        for c in range(arr.shape[2])
    ]
    return np.stack(chans, axis=2).astype(np.float64)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma weights."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    return arr[:, :, 0] * 0.299 + arr[:, :, 1] * 0.587 + arr[:, :, 2] * 0.114


def montage_axial(values: np.ndarray, cols: int = 0) -> np.ndarray:
    """Tile the z-slices of a (X, Y, Z) field in [0,1] into one grayscale RGB
    sheet, row-major, zero-padded on the last row."""
    x, y, z = values.shape
    if cols <= 0:
        cols = int(np.ceil(np.sqrt(z)))
    rows = -(-z // cols)
    sheet = np.zeros((rows * x, cols * y), dtype=np.float64)
    for k in range(z):
        r, c = divmod(k, cols)
        sheet[r * x : (r + 1) * x, c * y : (c + 1) * y] = values[:, :, k]
    return np.repeat(sheet[:, :, None], 3, axis=2)
