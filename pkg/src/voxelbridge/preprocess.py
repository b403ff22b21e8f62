"""Volume-to-token preprocessing: canonical trilinear resampling, masked
z-score normalization, cubic patch extraction with index bookkeeping, the
inverse patch-to-voxel map, MixUp, and the NPAT on-disk format.

Conventions (fixed so independent oracles agree):
* resampling is align-corners-false with edge clamping;
* zero padding is appended at the high end of each axis only;
* grid cells flatten x-fastest; within a cube values are x-fastest;
* normalization is a per-volume z-score over masked voxels (sigma floored at
  1e-6) applied affinely to the whole volume.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import FormatError, ValidationError
from .volume_io import BrainVolume

SIGMA_FLOOR = 1e-6
NPAT_MAGIC = "NPAT1"


@dataclass(frozen=True)
class PatchSpec:
    edge: int = 14
    canonical_dims: tuple[int, int, int] = (83, 104, 81)
    retain_threshold: int = 1

    def __post_init__(self):
        if self.edge < 1:
            raise ValidationError("patch edge must be >= 1")
        if any(d <= 0 for d in self.canonical_dims):
            raise ValidationError(f"canonical dims must be positive, got {self.canonical_dims}")
        if self.retain_threshold < 1:
            raise ValidationError("retain_threshold must be >= 1")

    @property
    def patch_len(self) -> int:
        return self.edge**3

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        r = self.edge
        return tuple(-(-d // r) * r for d in self.canonical_dims)

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        r = self.edge
        return tuple(-(-d // r) for d in self.canonical_dims)

    @property
    def pad(self) -> tuple[int, int, int]:
        return tuple(p - d for p, d in zip(self.padded_dims, self.canonical_dims))


@dataclass
class PatchIndexMap:
    grid_dims: tuple[int, int, int]
    retained: np.ndarray  # int64, strictly increasing flat cell indices
    pad: tuple[int, int, int]

    def __post_init__(self):
        self.retained = np.asarray(self.retained, dtype=np.int64)
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        self.pad = tuple(int(p) for p in self.pad)
        total = int(np.prod(self.grid_dims))
        if self.retained.size == 0:
            raise ValidationError("retained index list is empty")
        if np.any(np.diff(self.retained) <= 0):
            raise ValidationError("retained indices must be strictly increasing")
        if self.retained[0] < 0 or self.retained[-1] >= total:
            raise ValidationError("retained index out of grid range")

    @property
    def n_patches(self) -> int:
        return int(self.retained.size)

    def same_layout(self, other: "PatchIndexMap") -> bool:
        return (
            self.grid_dims == other.grid_dims
            and self.pad == other.pad
            and np.array_equal(self.retained, other.retained)
        )


@dataclass
class PatchedSignal:
    values: np.ndarray  # float32 (N, C)
    index_map: PatchIndexMap
    spec: PatchSpec
    provenance: str = ""

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        n, c = self.values.shape
        if n != self.index_map.n_patches:
            raise ValidationError(f"{n} rows but {self.index_map.n_patches} retained indices")
        if c != self.spec.patch_len:
            raise ValidationError(f"row length {c} != edge^3 = {self.spec.patch_len}")


@dataclass
class TaskMask:
    data: np.ndarray  # bool (X, Y, Z), canonical space

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data).astype(bool)
        if self.data.ndim != 3:
            raise ValidationError("mask must be 3D")
        if not self.data.any():
            raise ValidationError("mask has no true voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @classmethod
    def from_volume(cls, volume: BrainVolume, threshold: float = 0.5) -> "TaskMask":
        return cls(volume.data > threshold)


def build_union_mask(masks: list[TaskMask]) -> TaskMask:
    """Voxelwise OR of canonical-space masks."""
    if not masks:
        raise ValidationError("cannot union an empty mask list")
    dims = masks[0].dims
    out = np.zeros(dims, dtype=bool)
    for m in masks:
        if m.dims != dims:
            raise ValidationError(f"mask dims {m.dims} != {dims}")
        out |= m.data
    return TaskMask(out)


def trilinear_resize(volume: BrainVolume, target_dims) -> BrainVolume:
    target_dims = tuple(int(d) for d in target_dims)
    if any(d <= 0 for d in target_dims):
        raise ValidationError(f"target dims must be positive, got {target_dims}")
    if target_dims == volume.dims:
        return BrainVolume(volume.subject_id, volume.data.copy())
    out = _kernels.resize_trilinear(volume.data, target_dims)
    return BrainVolume(volume.subject_id, out)


def normalize(volume: BrainVolume, mask: TaskMask) -> BrainVolume:
    if volume.dims != mask.dims:
        raise ValidationError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    vals = volume.data[mask.data].astype(np.float64)
    mu = vals.mean()
    sigma = max(float(vals.std()), SIGMA_FLOOR)
    out = (volume.data.astype(np.float64) - mu) / sigma
    return BrainVolume(volume.subject_id, out.astype(np.float32))


def _pad_high(data: np.ndarray, padded_dims) -> np.ndarray:
    pads = [(0, p - d) for d, p in zip(data.shape, padded_dims)]
    if all(hi == 0 for _, hi in pads):
        return np.ascontiguousarray(data)
    return np.pad(data, pads, mode="constant", constant_values=0)


def _mask_counts_per_cell(mask: TaskMask, spec: PatchSpec) -> np.ndarray:
    gx, gy, gz = spec.grid_dims
    r = spec.edge
    padded = _pad_high(mask.data.astype(np.uint8), spec.padded_dims)
    cells = (
        padded.reshape(gx, r, gy, r, gz, r)
        .transpose(4, 2, 0, 5, 3, 1)
        .reshape(gx * gy * gz, r**3)
    )
    return cells.sum(axis=1, dtype=np.int64)


def patchify(volume: BrainVolume, spec: PatchSpec, mask: TaskMask,
             provenance: str | None = None) -> PatchedSignal:
    """Zero-pad to the patch grid, cut into disjoint r^3 cubes, and keep the
    cubes holding at least retain_threshold mask voxels."""
    if volume.dims != spec.canonical_dims:
        raise ValidationError(
            f"volume dims {volume.dims} != canonical dims {spec.canonical_dims}"
        )
    if mask.dims != spec.canonical_dims:
        raise ValidationError(f"mask dims {mask.dims} != canonical dims {spec.canonical_dims}")
    counts = _mask_counts_per_cell(mask, spec)
    retained = np.flatnonzero(counts >= spec.retain_threshold).astype(np.int64)
    if retained.size == 0:
        raise ValidationError("mask retains no patches")
    padded = _pad_high(volume.data, spec.padded_dims)
    values = _kernels.gather_patches(padded, spec.edge, spec.grid_dims, retained)
    index_map = PatchIndexMap(grid_dims=spec.grid_dims, retained=retained, pad=spec.pad)
    return PatchedSignal(values=values, index_map=index_map, spec=spec,
                         provenance=volume.subject_id if provenance is None else provenance)


def depatchify(signal: PatchedSignal) -> BrainVolume:
    """Scatter retained cubes back to a canonical-dims volume; everything
    outside retained cubes (and all padding) is zero."""
    spec = signal.spec
    padded = _kernels.scatter_patches(
        signal.values, spec.edge, signal.index_map.grid_dims, signal.index_map.retained
    )
    x, y, z = spec.canonical_dims
    return BrainVolume("", np.ascontiguousarray(padded[:x, :y, :z]))


def mixup(b1: PatchedSignal, b2: PatchedSignal, lam: float) -> PatchedSignal:
    """Convex combination lam*b1 + (1-lam)*b2 of two aligned patched signals."""
    if not (0.0 <= lam <= 1.0):
        raise ValidationError(f"mixup coefficient must be in [0,1], got {lam}")
    if b1.spec != b2.spec or not b1.index_map.same_layout(b2.index_map):
        raise ValidationError("mixup requires matching patch spec and index map")
    lam32 = np.float32(lam)
    values = lam32 * b1.values + (np.float32(1.0) - lam32) * b2.values
    return PatchedSignal(values=values, index_map=b1.index_map, spec=b1.spec,
                         provenance=b1.provenance)


# ---------------------------------------------------------------------------
# NPAT on-disk format


def write_patched(signal: PatchedSignal, path) -> None:
    m = signal.index_map
    retained = " ".join(str(int(i)) for i in m.retained)
    header = (
        f"{NPAT_MAGIC}\n"
        f"grid {m.grid_dims[0]} {m.grid_dims[1]} {m.grid_dims[2]}\n"
        f"r {signal.spec.edge}\n"
        f"pad {m.pad[0]} {m.pad[1]} {m.pad[2]}\n"
        f"retained {m.n_patches} {retained}\n"
        "---\n"
    )
    payload = signal.values.astype("<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def read_patched(path, retain_threshold: int = 1) -> PatchedSignal:
    raw = Path(path).read_bytes()
    sep = b"---\n"
    cut = raw.find(sep)
    if cut < 0:
        raise FormatError(f"{path}: missing header terminator '---'")
    lines = raw[:cut].decode("ascii", errors="replace").splitlines()
    if len(lines) != 5:
        raise FormatError(f"{path}: expected 5 header lines, got {len(lines)}")
    if lines[0] != NPAT_MAGIC:
        raise FormatError(f"{path}: bad magic {lines[0]!r}")
    try:
        grid = tuple(int(t) for t in lines[1].split()[1:4])
        edge = int(lines[2].split()[1])
        pad = tuple(int(t) for t in lines[3].split()[1:4])
        rtok = lines[4].split()
        n = int(rtok[1])
        retained = np.asarray([int(t) for t in rtok[2:]], dtype=np.int64)
        if len(grid) != 3 or len(pad) != 3:
            raise ValueError("grid/pad lines need three integers")
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed NPAT header") from exc
    if retained.size != n:
        raise FormatError(f"{path}: retained count {n} != {retained.size} indices")
    payload = raw[cut + len(sep):]
    c = edge**3
    if len(payload) != n * c * 4:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, expected {n * c * 4}")
    values = np.frombuffer(payload, dtype="<f4").reshape(n, c).copy()
    canonical = tuple(g * edge - p for g, p in zip(grid, pad))
    spec = PatchSpec(edge=edge, canonical_dims=canonical, retain_threshold=retain_threshold)
    index_map = PatchIndexMap(grid_dims=grid, retained=retained, pad=pad)
    return PatchedSignal(values=values, index_map=index_map, spec=spec,
                         provenance=Path(path).stem)
