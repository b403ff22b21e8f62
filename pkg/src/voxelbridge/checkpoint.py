"""Tensor checkpoint directories.

Layout: ``manifest.json`` maps tensor name -> {shape, dtype (always f32le),
file, sha256}; each tensor lives in its own raw float32 little-endian file;
``config.json`` carries the model configuration and training metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import FormatError


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_tensors(ckpt_dir, tensors: dict[str, np.ndarray], config: dict) -> Path:
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        payload = arr.tobytes()
        fname = name + ".f32"
        (d / fname).write_bytes(payload)
        manifest[name] = {
            "shape": list(arr.shape),
            "dtype": "f32le",
            "file": fname,
            "sha256": _sha256(payload),
        }
    (d / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (d / "config.json").write_text(
        json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return d


def load_tensors(ckpt_dir) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(ckpt_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{ckpt_dir}: not a checkpoint (missing manifest.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tensors = {}
    for name, entry in manifest.items():
        if entry.get("dtype") != "f32le":
            raise FormatError(f"{ckpt_dir}: tensor {name} has unsupported dtype")
        payload = (d / entry["file"]).read_bytes()
        if _sha256(payload) != entry["sha256"]:
            raise FormatError(f"{ckpt_dir}: tensor {name} failed its content hash")
        arr = np.frombuffer(payload, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[name] = arr
    config = json.loads((d / "config.json").read_text(encoding="utf-8"))
    return tensors, config


def checkpoint_digest(ckpt_dir) -> str:
    """Stable digest over manifest + config, for determinism comparisons."""
    d = Path(ckpt_dir)
    h = hashlib.sha256()
    h.update((d / "manifest.json").read_bytes())
    h.update((d / "config.json").read_bytes())
    return h.hexdigest()
