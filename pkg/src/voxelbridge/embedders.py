"""Target embedder interfaces: the image-embedding extractor, the image-latent
extractor, and the text embedder used as the localization target.

Each has a deterministic desk-scale stand-in (seeded random projection for
images, hashed character 3-grams for text) plus an adapter contract for real
pretrained models. Stand-ins are pure functions of their inputs and stable
across platforms (fixed hash, fixed projection seed).
"""

from __future__ import annotations

import hashlib
import struct
import subprocess
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import CapabilityError, ValidationError

KINDS = ("image_embedding", "image_latent", "text_embedding")
_PATCH_SIDE = 16  # stand-in images are pooled to 16x16x3 before projection


@dataclass(frozen=True)
class EmbedderSpec:
    kind: str
    dim: int
    impl: str = "standin"  # standin | external
    seed: int = 0
    adapter_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown embedder kind {self.kind!r}")
        if self.dim <= 0:
            raise ValidationError("embedder dim must be positive")
        if self.impl not in ("standin", "external"):
            raise ValidationError(f"unknown embedder impl {self.impl!r}")


# In-process adapter registry: adapter_id -> callable(bytes) -> np.ndarray.
_ADAPTERS: dict[str, object] = {}


def register_adapter(adapter_id: str, fn) -> None:
    _ADAPTERS[adapter_id] = fn


def clear_adapters() -> None:
    _ADAPTERS.clear()


class ExternalProcessAdapter:
    """Adapter contract: feed input bytes on stdin, read dim float32 LE values
    from stdout."""

    def __init__(self, command: list[str], dim: int):
        self.command = list(command)
        self.dim = dim

    def __call__(self, payload: bytes) -> np.ndarray:
        proc = subprocess.run(self.command, input=payload, stdout=subprocess.PIPE, check=True)
        out = np.frombuffer(proc.stdout, dtype="<f4")
        if out.shape[0] != self.dim:
            raise ValidationError(
                f"adapter emitted {out.shape[0]} values, expected {self.dim}"
            )
        return out.astype(np.float64)


def _adapter_for(spec: EmbedderSpec):
    fn = _ADAPTERS.get(spec.adapter_id)
    if fn is None:
        raise CapabilityError(
            f"external embedder adapter {spec.adapter_id!r} is not registered; "
            "run with a stand-in spec to degrade explicitly"
        )

    def checked(payload: bytes) -> np.ndarray:
        out = np.asarray(fn(payload), dtype=np.float64)
        if out.shape != (spec.dim,):
            raise ValidationError(
                f"adapter {spec.adapter_id!r} emitted shape {out.shape}, expected ({spec.dim},)"
            )
        return out

    return checked


@lru_cache(maxsize=16)
def _image_projection(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([71, seed])
    return rng.standard_normal((dim, _PATCH_SIDE * _PATCH_SIDE * 3)) / np.sqrt(
        _PATCH_SIDE * _PATCH_SIDE * 3
    )


def _pool_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValidationError(f"expected a nonempty (H, W, 3) raster, got shape {img.shape}")
    channels = [
        _kernels.resize_trilinear(
            np.ascontiguousarray(img[:, :, c])[:, :, None], (_PATCH_SIDE, _PATCH_SIDE, 1)
        )[:, :, 0]
        for c in range(3)
    ]
    flat = np.stack(channels, axis=2).astype(np.float64).ravel()
    # center before projecting: the shared brightness component would otherwise
    # dominate every angle and unrelated images would not decorrelate
    return flat - flat.mean()


def embed_image(spec: EmbedderSpec, image: np.ndarray) -> np.ndarray:
    """Image embedding stand-in: pool to 16x16x3, apply a fixed seeded random
    projection, then L2-normalize (image_embedding) or leave raw scale
    (image_latent)."""
    if spec.kind not in ("image_embedding", "image_latent"):
        raise ValidationError(f"embed_image needs an image kind, got {spec.kind}")
    if spec.impl == "external":
        img32 = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
        header = struct.pack("<III", *img32.shape) if img32.ndim == 3 else b""
        return _adapter_for(spec)(header + img32.tobytes())
    flat = _pool_image(image)
    vec = _image_projection(spec.dim, spec.seed) @ flat
    if spec.kind == "image_embedding":
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            vec = np.zeros(spec.dim)
            vec[0] = 1.0  # degenerate all-zero image: fixed unit fallback
        else:
            vec = vec / norm
    return vec


def _gram_hash(gram: str) -> int:
    digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def embed_text(spec: EmbedderSpec, text: str) -> np.ndarray:
    """Text embedding stand-in: hash case-folded character 3-grams into a
    signed count vector and L2-normalize."""
    if spec.kind != "text_embedding":
        raise ValidationError(f"embed_text needs kind text_embedding, got {spec.kind}")
    if not text:
        raise ValidationError("cannot embed empty text")
    if spec.impl == "external":
        return _adapter_for(spec)(text.encode("utf-8"))
    padded = f" {text.casefold()} "
    counts = np.zeros(spec.dim, dtype=np.float64)
    for i in range(len(padded) - 2):
        h = _gram_hash(padded[i:i + 3])
        sign = 1.0 if (h >> 32) & 1 else -1.0
        counts[h % spec.dim] += sign
    norm = np.linalg.norm(counts)
    if norm < 1e-12:
        counts[_gram_hash(padded) % spec.dim] = 1.0
        return counts
    return counts / norm
