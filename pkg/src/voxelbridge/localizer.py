"""Gradient-based concept localization inside the fMRI signal.

The relevance score of a patch token is the ReLU of its activation projected
onto the token-averaged gradient of a cosine similarity between the predicted
image embedding and a text-embedding target (the token adaptation of
gradient-weighted class activation mapping). Per-scale token relevances are
painted uniformly into their voxel cubes, max-normalized, averaged across
patch scales, and normalized again. Nullification zeroes the voxels above a
percentile of the heatmap and hands the modified volume back for
re-extraction."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import _kernels
from .embedders import EmbedderSpec, embed_text
from .encoder import FmriEncoder
from .errors import ValidationError
from .preprocess import PatchedSignal
from .volume_io import BrainVolume, read_volume, write_volume

log = logging.getLogger(__name__)

_LOC_TEMPLATE = re.compile(r'^Locating the concept of "(.*)"$')


@dataclass
class VoxelHeatmap:
    values: np.ndarray  # (X, Y, Z) float32 in [0, 1]
    concept: str
    scales_used: list[int]

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValidationError("heatmap must be a 3D field")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValidationError("heatmap values must lie in [0, 1]")


def extract_concept(bridge_state, instruction: str, penultimate=None,
                    max_tokens: int = 16) -> str:
    """Parse the quoted object out of the localization template; otherwise ask
    the bridge and keep the first whitespace-delimited token of its reply."""
    if not instruction:
        raise ValidationError("instruction must be nonempty")
    match = _LOC_TEMPLATE.match(instruction)
    if match:
        return match.group(1)
    if bridge_state is None or penultimate is None:
        raise ValidationError(
            "instruction does not match the localization template and no bridge "
            "is available to interpret it"
        )
    from .bridge import generate

    reply = generate(bridge_state, penultimate, instruction, max_tokens=max_tokens).strip()
    if not reply:
        raise ValidationError("bridge produced an empty concept")
    return reply.split()[0]


def gradcam(model: FmriEncoder, signal: PatchedSignal, target,
            layer: int | None = None) -> np.ndarray:
    """Per-patch-token relevance of the cosine between the predicted embedding
    and `target`, taken at block `layer` (1-based; default: penultimate)."""
    target = np.asarray(target, dtype=np.float64)
    norm = float(np.linalg.norm(target))
    if norm == 0.0:
        raise ValidationError("gradcam target has zero norm")
    n_layers = model.config.n_layers
    if n_layers < 1:
        raise ValidationError("gradcam needs at least one transformer block")
    if layer is None:
        layer = max(1, n_layers - 1)
    if not (1 <= layer <= n_layers):
        raise ValidationError(f"layer {layer} outside [1, {n_layers}]")

    dtype = next(model.parameters()).dtype
    values = torch.from_numpy(np.ascontiguousarray(signal.values)).to(dtype).unsqueeze(0)
    retained = torch.from_numpy(np.ascontiguousarray(signal.index_map.retained))
    model.eval()
    with torch.enable_grad():
        trace = model.forward_tokens(values, retained, collect_hidden=True)
        acts = trace.hidden_states[layer]
        t = torch.from_numpy(target / norm).to(dtype)
        pred = trace.pred_embed[0]
        score = (pred @ t) / torch.clamp(pred.norm(), min=1e-12)
        grads = torch.autograd.grad(score, acts, allow_unused=True)[0]
    if grads is None:  # score does not depend on this layer's patch tokens
        return np.zeros(signal.index_map.n_patches, dtype=np.float64)
    g = grads[0, 1:, :]  # patch tokens only; the class token has no voxels
    a = acts.detach()[0, 1:, :]
    weights = g.mean(dim=0)
    relevance = torch.relu((a * weights[None, :]).sum(dim=-1))
    return relevance.numpy().astype(np.float64)


def _paint_scale(relevance: np.ndarray, signal: PatchedSignal) -> np.ndarray:
    """Spread each token's relevance uniformly over its r^3 cube and crop the
    padding; returns a canonical-dims float array."""
    spec = signal.spec
    rows = np.repeat(
        relevance.astype(np.float32)[:, None], spec.patch_len, axis=1
    )
    padded = _kernels.scatter_patches(rows, spec.edge, signal.index_map.grid_dims,
                                      signal.index_map.retained)
    x, y, z = spec.canonical_dims
    return padded[:x, :y, :z].astype(np.float64)


def _max_normalize(field: np.ndarray) -> np.ndarray:
    peak = field.max()
    return field / peak if peak > 0 else field


def localize(scales: list[tuple[FmriEncoder, PatchedSignal]], concept: str,
             text_spec: EmbedderSpec, layer: int | None = None,
             target_override=None) -> VoxelHeatmap:
    """Fuse per-scale relevance maps (one trained model per patch edge) into a
    canonical-space heatmap for `concept`. All signals must come from the same
    source volume. `target_override` substitutes the text embedding (used by
    planted-world validation)."""
    if not scales:
        raise ValidationError("localize needs at least one (model, signal) scale")
    dims = {s.spec.canonical_dims for _, s in scales}
    if len(dims) != 1:
        raise ValidationError(f"scales disagree on canonical dims: {sorted(dims)}")
    provs = {s.provenance for _, s in scales if s.provenance}
    if len(provs) > 1:
        raise ValidationError(f"scales built from different source volumes: {sorted(provs)}")
    target = (np.asarray(target_override, dtype=np.float64)
              if target_override is not None else embed_text(text_spec, concept))

    fused = None
    edges = []
    for model, signal in scales:
        relevance = gradcam(model, signal, target, layer=layer)
        field = _max_normalize(_paint_scale(relevance, signal))
        fused = field if fused is None else fused + field
        edges.append(signal.spec.edge)
    fused = _max_normalize(fused / len(scales))
    return VoxelHeatmap(values=fused.astype(np.float32), concept=concept,
                        scales_used=edges)


def nullify(volume: BrainVolume, heatmap: VoxelHeatmap, tau: float) -> BrainVolume:
    """Zero the voxels whose heatmap value reaches the tau-th percentile of
    the nonzero heatmap values; all other voxels pass through untouched."""
    if not (0.0 < tau < 100.0):
        raise ValidationError(f"tau must be a percentile in (0, 100), got {tau}")
    if volume.dims != tuple(heatmap.values.shape):
        raise ValidationError(
            f"heatmap dims {heatmap.values.shape} do not match volume {volume.dims}"
        )
    nonzero = heatmap.values[heatmap.values > 0]
    out = volume.data.copy()
    if nonzero.size == 0:
        log.warning("nullify: heatmap is all zero; volume returned unchanged")
        return BrainVolume(volume.subject_id, out)
    threshold = np.percentile(nonzero.astype(np.float64), tau)
    out[heatmap.values >= threshold] = 0.0
    return BrainVolume(volume.subject_id, out)


# ---------------------------------------------------------------------------
# Heatmap export


def export_heatmap(heatmap: VoxelHeatmap, nvol_path, extra_meta: dict | None = None) -> None:
    write_volume(BrainVolume("", heatmap.values), nvol_path)
    meta = {"concept": heatmap.concept, "scales": list(heatmap.scales_used)}
    meta.update(extra_meta or {})
    Path(str(nvol_path) + ".meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_heatmap(nvol_path) -> VoxelHeatmap:
    vol = read_volume(nvol_path)
    meta_path = Path(str(nvol_path) + ".meta.json")
    concept, scales = "", []
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        concept = meta.get("concept", "")
        scales = meta.get("scales", [])
    return VoxelHeatmap(values=vol.data, concept=concept, scales_used=scales)
