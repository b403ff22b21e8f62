"""Image reconstruction from predicted targets: the beta-mixed latent
conditioning rule behind a pluggable decoder interface.

The conditioning bundle fixes the contract at the decoder boundary: an initial
latent mixed from the predicted image latent and seeded Gaussian noise, the
predicted image embedding, and a generated text prompt. The deterministic
stand-in decoder renders the embedding through a low-frequency cosine basis
plus an upsampled reshape of the initial latent, which is enough for metric
plumbing and beta sweeps; real diffusion decoders plug in as adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import encoder as enc
from .embedders import EmbedderSpec, embed_text
from .errors import CapabilityError, ValidationError
from .imaging import resize_image
from .templates import RECONSTRUCTION_INSTRUCTIONS

_NOISE_STREAM = 131


@dataclass
class ConditioningBundle:
    init_latent: np.ndarray  # (d_v,) = (1-beta)*pred_latent + beta*noise
    clip_cond: np.ndarray    # (d_c,) predicted image embedding
    prompt: str
    beta: float
    noise_seed: int

    def __post_init__(self):
        self.init_latent = np.asarray(self.init_latent, dtype=np.float64)
        self.clip_cond = np.asarray(self.clip_cond, dtype=np.float64)
        if not (np.isfinite(self.init_latent).all() and np.isfinite(self.clip_cond).all()):
            raise ValidationError("conditioning bundle holds non-finite values")


def make_bundle(pred_latent, pred_embed, prompt: str, beta: float,
                noise_seed: int) -> ConditioningBundle:
    """Mix the latent prior with standard normal noise: (1-beta)*latent +
    beta*noise, noise drawn i.i.d. per component from noise_seed."""
    if not (0.0 <= beta <= 1.0):
        raise ValidationError(f"beta must be in [0,1], got {beta}")
    latent = np.asarray(pred_latent, dtype=np.float64)
    emb = np.asarray(pred_embed, dtype=np.float64)
    noise = np.random.default_rng([_NOISE_STREAM, int(noise_seed)]).standard_normal(latent.shape)
    init = (1.0 - beta) * latent + beta * noise
    return ConditioningBundle(init_latent=init, clip_cond=emb, prompt=prompt,
                              beta=beta, noise_seed=int(noise_seed))


# ---------------------------------------------------------------------------
# Decoders

_DECODER_ADAPTERS: dict[str, object] = {}


def register_decoder_adapter(adapter_id: str, fn) -> None:
    _DECODER_ADAPTERS[adapter_id] = fn


@dataclass(frozen=True)
class DecoderHandle:
    impl: str = "standin"  # standin | external
    seed: int = 0
    adapter_id: str | None = None
    output_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        if self.impl not in ("standin", "external"):
            raise ValidationError(f"unknown decoder impl {self.impl!r}")
        if any(s <= 0 for s in self.output_size):
            raise ValidationError("decoder output size must be positive")


_N_MODES = 4  # cosine modes per axis; 16 basis functions per channel


@lru_cache(maxsize=8)
def _cosine_basis(h: int, w: int) -> np.ndarray:
    """(h*w, 16) low-frequency separable cosine sheets, unit pixel RMS."""
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    basis = []
    for fy in range(_N_MODES):
        for fx in range(_N_MODES):
            sheet = np.cos(math.pi * fy * ys)[:, None] * np.cos(math.pi * fx * xs)[None, :]
            flat = sheet.ravel()
            basis.append(flat / np.sqrt(np.mean(flat**2)))
    return np.stack(basis, axis=1)


class StandinDecoder:
    """Fixed-seeded linear renderer. The embedding-to-coefficient map is
    spectrally normalized, so coefficient space moves at most 1:1 with the
    conditioning embedding (the 1-Lipschitz contract, checkable by sampling).
    """

    def __init__(self, handle: DecoderHandle, embed_dim: int, prompt_dim: int = 32):
        self.handle = handle
        self.embed_dim = embed_dim
        rng = np.random.default_rng([97, handle.seed])
        n_coeff = 3 * _N_MODES * _N_MODES
        proj = rng.standard_normal((n_coeff, embed_dim))
        self.embed_to_coeff = proj / np.linalg.svd(proj, compute_uv=False)[0]
        prompt_proj = rng.standard_normal((n_coeff, prompt_dim))
        self.prompt_to_coeff = prompt_proj / np.linalg.svd(prompt_proj, compute_uv=False)[0]
        self.prompt_spec = EmbedderSpec(kind="text_embedding", dim=prompt_dim,
                                        seed=handle.seed + 1)

    def coefficients(self, bundle: ConditioningBundle) -> np.ndarray:
        coeff = self.embed_to_coeff @ bundle.clip_cond
        if bundle.prompt:
            coeff = coeff + 0.4 * (self.prompt_to_coeff @ embed_text(self.prompt_spec,
                                                                     bundle.prompt))
        return coeff

    def render(self, bundle: ConditioningBundle) -> np.ndarray:
        h, w = self.handle.output_size
        basis = _cosine_basis(h, w)
        coeff = self.coefficients(bundle).reshape(3, _N_MODES * _N_MODES)
        low = np.stack([(basis @ coeff[c]).reshape(h, w) for c in range(3)], axis=2)

        side = max(1, int(math.isqrt(bundle.init_latent.shape[0])))
        tile = bundle.init_latent[: side * side].reshape(side, side)
        residual = resize_image(tile, (h, w))

        img = 0.5 + 0.35 * low + 0.12 * residual[:, :, None]
        return np.clip(img, 0.0, 1.0)


_STANDIN_CACHE: dict[tuple, StandinDecoder] = {}


def reconstruct(handle: DecoderHandle, bundle: ConditioningBundle) -> np.ndarray:
    """Render (H, W, 3) floats in [0,1] from a conditioning bundle."""
    if handle.impl == "external":
        fn = _DECODER_ADAPTERS.get(handle.adapter_id)
        if fn is None:
            raise CapabilityError(
                f"decoder adapter {handle.adapter_id!r} is not registered"
            )
        return np.asarray(fn(bundle), dtype=np.float64)
    key = (handle.seed, handle.output_size, bundle.clip_cond.shape[0])
    decoder = _STANDIN_CACHE.get(key)
    if decoder is None:
        decoder = StandinDecoder(handle, embed_dim=bundle.clip_cond.shape[0])
        _STANDIN_CACHE[key] = decoder
    return decoder.render(bundle)


def recon_pipeline(encoder_model, bridge_state, decoder: DecoderHandle,
                   signal, beta: float, noise_seed: int = 0,
                   instruction: str | None = None,
                   max_prompt_tokens: int = 64) -> tuple[np.ndarray, str]:
    """Full reconstruction path: predict targets from the patched signal, let
    the bridge write the reconstruction prompt (empty when bridge-less), mix
    the latent under beta, and decode."""
    from .bridge import generate  # local import to avoid a cycle

    trace = enc.forward(encoder_model, signal, want_trace=True)
    if bridge_state is None:
        prompt = ""
    else:
        instruction = instruction or RECONSTRUCTION_INSTRUCTIONS[0]
        prompt = generate(bridge_state, trace.penultimate.numpy(), instruction,
                          max_tokens=max_prompt_tokens)
    bundle = make_bundle(trace.pred_latent.numpy(), trace.pred_embed.numpy(),
                         prompt, beta, noise_seed)
    return reconstruct(decoder, bundle), prompt
