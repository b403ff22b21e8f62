"""Flat key=value run configuration.

Every module default lives here under one documented key; unknown keys are
rejected; the effective configuration is echoed into each run directory.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ValidationError

# key -> (default, doc)
DEFAULTS: dict[str, tuple[object, str]] = {
    "seed": (0, "root seed; per-stage seeds derive from it"),
    "canonical_dims": ("83,104,81", "canonical volume dims after resampling"),
    "patch_edge": (14, "cubic patch edge length in voxels"),
    "retain_threshold": (1, "min mask voxels for a patch to be retained"),
    "embed_dim": (64, "image-embedding target length (desk default)"),
    "latent_dim": (256, "image-latent target length, flattened (desk default)"),
    "latent_k": (16, "synthetic-world latent dimensionality"),
    "alpha": (1.0 / 64.0, "latent-head weight in the alignment loss"),
    "beta": (0.93, "noise share in the reconstruction latent mix"),
    "lr_align": (5e-4, "extractor learning rate"),
    "epochs_align": (30, "extractor training epochs"),
    "batch_align": (32, "extractor batch size"),
    "mixup": (True, "blend same-stimulus trials during extractor training"),
    "val_fraction": (0.0, "stimulus fraction held out for validation loss"),
    "lr_bridge": (2e-5, "bridge learning rate"),
    "epochs_bridge": (1, "bridge training epochs per stage"),
    "batch_bridge": (4, "bridge batch size (desk-scale deviation from 32/24)"),
    "enc_layers": (16, "transformer encoder depth"),
    "enc_hidden": (768, "transformer encoder width"),
    "enc_heads": (0, "attention heads; 0 means width//64"),
    "enc_mlp_ratio": (4.0, "encoder MLP expansion ratio"),
    "head_hidden": (1024, "hidden width of the two alignment heads"),
    "dropout": (0.0, "encoder dropout"),
    "lm_vocab": (260, "stand-in language model vocabulary (bytes + 4 controls)"),
    "lm_layers": (2, "stand-in language model depth"),
    "lm_width": (128, "stand-in language model width"),
    "lm_heads": (4, "stand-in language model attention heads"),
    "lm_max_len": (512, "stand-in language model context length"),
    "image_embedder": ("standin", "image embedder impl: standin or external:<adapter>"),
    "text_embedder": ("standin", "text embedder impl: standin or external:<adapter>"),
    "decoder": ("standin", "image decoder impl: standin or external:<adapter>"),
    "decoder_seed": (0, "stand-in decoder seed"),
    "decoder_size": ("64,64", "decoder output size H,W (desk default; 512,512 real)"),
    "eval_resolution": ("425,425", "protocol resolution for pixcorr/ssim"),
    "tau": (90.0, "nullification percentile"),
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key][0]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ValidationError(f"config key {key}: expected a number, got {raw!r}") from exc
    return raw.strip()


class RunConfig:
    def __init__(self, values: dict | None = None):
        self._values = {k: v for k, (v, _) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ValidationError(f"unknown config key {k!r}")
            self._values[k] = v

    @classmethod
    def load(cls, path) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in DEFAULTS:
                raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
        return cls(values)

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise ValidationError(f"unknown config key {key!r}")
        return self._values[key]

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ValidationError(f"unknown config key {key!r}")
        self._values[key] = value

    def dims(self, key: str) -> tuple[int, ...]:
        return tuple(int(t) for t in str(self._values[key]).split(","))

    def effective(self) -> dict:
        return dict(sorted(self._values.items()))

    @staticmethod
    def documentation() -> str:
        width = max(len(k) for k in DEFAULTS)
        lines = [f"{k.ljust(width)}  default={v!r:18}  {doc}" for k, (v, doc) in DEFAULTS.items()]
        return "\n".join(lines)
