"""Volume and dataset I/O plus the seeded synthetic world.

On-disk formats (all bit-exact):

* NVOL1 volume: 5 ASCII header lines (``NVOL1``, ``dims X Y Z``,
  ``dtype f32le``, ``order x-fastest``, ``---``) followed by X*Y*Z float32
  little-endian values with x varying fastest, then y, then z.
* Dataset manifest: UTF-8 JSON lines; first line ``{"targets_path": ...}``,
  then one record object per line.
* Targets store: one directory per stimulus_id holding ``z_c.f32`` and
  ``z_v.f32`` (raw float32 LE), ``captions.txt`` (one per line), an optional
  ground-truth ``image.ppm``, and a ``conversations/`` directory.

In memory a volume is a C-contiguous float32 array of shape (X, Y, Z) with
axis 0 = x; converting to/from the x-fastest file raster uses Fortran order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    NonFiniteError,
    PayloadMismatchError,
    ValidationError,
)

NVOL_MAGIC = "NVOL1"

# Small noun vocabulary for deterministic synthetic captions.
OBJECT_VOCAB = (
    "zebra", "train", "clock", "pizza", "boat", "kite", "horse", "bottle",
    "bench", "laptop", "bird", "vase", "truck", "sheep", "umbrella", "cat",
)


@dataclass
class BrainVolume:
    """A subject-space 3D BOLD scalar field."""

    subject_id: str
    data: np.ndarray  # float32, shape (X, Y, Z), axis 0 = x

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"volume data must be 3D, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    def validate_finite(self) -> None:
        if not np.isfinite(self.data).all():
            raise NonFiniteError("volume contains NaN or Inf values")


def write_volume(volume: BrainVolume, path) -> None:
    """Serialize a volume to the NVOL1 format. Rejects non-finite values."""
    volume.validate_finite()
    x, y, z = volume.dims
    header = f"{NVOL_MAGIC}\ndims {x} {y} {z}\ndtype f32le\norder x-fastest\n---\n"
    payload = volume.data.ravel(order="F").astype("<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def read_volume(path, subject_id: str = "") -> BrainVolume:
    """Load an NVOL1 file. The subject tag travels outside the format (in the
    dataset manifest), so callers may supply it here."""
    raw = Path(path).read_bytes()
    sep = b"---\n"
    cut = raw.find(sep)
    if cut < 0:
        raise FormatError(f"{path}: missing header terminator '---'")
    lines = raw[:cut].decode("ascii", errors="replace").splitlines()
    if len(lines) != 4:
        raise FormatError(f"{path}: expected 4 header lines before '---', got {len(lines)}")
    if lines[0] != NVOL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {lines[0]!r}")
    tok = lines[1].split()
    if len(tok) != 4 or tok[0] != "dims":
        raise FormatError(f"{path}: malformed dims line {lines[1]!r}")
    try:
        x, y, z = (int(t) for t in tok[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: non-integer dims {lines[1]!r}") from exc
    if x <= 0 or y <= 0 or z <= 0:
        raise FormatError(f"{path}: non-positive dims ({x},{y},{z})")
    if lines[2] != "dtype f32le":
        raise FormatError(f"{path}: unsupported dtype line {lines[2]!r}")
    if lines[3] != "order x-fastest":
        raise FormatError(f"{path}: unsupported order line {lines[3]!r}")
    payload = raw[cut + len(sep):]
    expected = x * y * z * 4
    if len(payload) != expected:
        raise PayloadMismatchError(
            f"{path}: payload holds {len(payload)} bytes, dims require {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    data = np.ascontiguousarray(flat.reshape((x, y, z), order="F"))
    vol = BrainVolume(subject_id=subject_id, data=data)
    vol.validate_finite()
    return vol


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass
class ManifestRecord:
    record_id: str
    subject_id: str
    volume_path: str
    stimulus_id: str
    trial_index: int


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    targets_path: str

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.trial_index < 0:
                raise ValidationError(f"record {rec.record_id}: negative trial_index")
            key = (rec.stimulus_id, rec.subject_id, rec.trial_index)
            if key in seen:
                raise ValidationError(f"duplicate (stimulus, subject, trial) {key}")
            seen.add(key)

    def validate_against_store(self, base_dir) -> None:
        self.validate()
        store = Path(base_dir) / self.targets_path
        for rec in self.records:
            if not (store / rec.stimulus_id).is_dir():
                raise ValidationError(
                    f"record {rec.record_id}: stimulus {rec.stimulus_id} missing from targets store"
                )


def write_manifest(manifest: DatasetManifest, path) -> None:
    manifest.validate()
    lines = [json.dumps({"targets_path": manifest.targets_path}, sort_keys=True)]
    for rec in manifest.records:
        lines.append(json.dumps(vars(rec), sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    head = json.loads(lines[0])
    if "targets_path" not in head:
        raise FormatError(f"{path}: first line must carry targets_path")
    records = [ManifestRecord(**json.loads(ln)) for ln in lines[1:]]
    manifest = DatasetManifest(records=records, targets_path=head["targets_path"])
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# Stimulus targets store


@dataclass
class StimulusTargets:
    """Ground-truth targets for one stimulus: an image-embedding vector, a
    flattened image-latent vector, captions, and conversation record ids."""

    stimulus_id: str
    image_embed: np.ndarray  # float32 (d_c,)
    image_latent: np.ndarray  # float32 (d_v,)
    captions: list[str] = field(default_factory=list)
    conversations: list[str] = field(default_factory=list)
    image_path: str | None = None


def save_targets(store_dir, targets: StimulusTargets) -> Path:
    d = Path(store_dir) / targets.stimulus_id
    d.mkdir(parents=True, exist_ok=True)
    np.asarray(targets.image_embed, dtype="<f4").tofile(d / "z_c.f32")
    np.asarray(targets.image_latent, dtype="<f4").tofile(d / "z_v.f32")
    (d / "captions.txt").write_text(
        "".join(c + "\n" for c in targets.captions), encoding="utf-8"
    )
    (d / "conversations").mkdir(exist_ok=True)
    return d


def load_targets(store_dir, stimulus_id: str,
                 embed_dim: int | None = None,
                 latent_dim: int | None = None) -> StimulusTargets:
    d = Path(store_dir) / stimulus_id
    if not d.is_dir():
        raise ValidationError(f"stimulus {stimulus_id} not found in {store_dir}")
    embed = np.fromfile(d / "z_c.f32", dtype="<f4")
    latent = np.fromfile(d / "z_v.f32", dtype="<f4")
    if embed_dim is not None and embed.shape[0] != embed_dim:
        raise ValidationError(
            f"{stimulus_id}: embedding length {embed.shape[0]} != configured {embed_dim}"
        )
    if latent_dim is not None and latent.shape[0] != latent_dim:
        raise ValidationError(
            f"{stimulus_id}: latent length {latent.shape[0]} != configured {latent_dim}"
        )
    captions_file = d / "captions.txt"
    captions = []
    if captions_file.exists():
        captions = [ln for ln in captions_file.read_text(encoding="utf-8").splitlines() if ln]
    conv_dir = d / "conversations"
    conversations = sorted(p.stem for p in conv_dir.glob("*.json")) if conv_dir.is_dir() else []
    image_path = None
    for name in ("image.ppm", "image.png"):
        if (d / name).exists():
            image_path = str(d / name)
            break
    return StimulusTargets(
        stimulus_id=stimulus_id,
        image_embed=embed,
        image_latent=latent,
        captions=captions,
        conversations=conversations,
        image_path=image_path,
    )


def list_stimuli(store_dir) -> list[str]:
    return sorted(p.name for p in Path(store_dir).iterdir() if p.is_dir())


# ---------------------------------------------------------------------------
# Synthetic world

# Stream tags separating the RNG namespaces derived from the world seed.
_STREAM_WORLD = 11
_STREAM_STIM = 23
_STREAM_NOISE = 37
_STREAM_BACKGROUND = 53


@dataclass
class SyntheticWorld:
    """A linear generative stand-in world: a latent draw per stimulus maps to
    the two visual targets and to the masked voxel responses."""

    seed: int
    embed_dim: int
    latent_dim: int
    latent_k: int
    grid_dims: tuple[int, int, int]
    mask: np.ndarray            # bool (X, Y, Z)
    n_mask_voxels: int
    noise_sigma: float
    voxel_loadings: np.ndarray  # float64 (M, K): per-voxel latent weights
    embed_proj: np.ndarray      # float64 (d_c, K)
    latent_proj: np.ndarray     # float64 (d_v, K)
    subject_id: str = "subj-synth"
    # Planted-concept fields (None for the standard world).
    concept: str | None = None
    concept_region: np.ndarray | None = None  # bool (X, Y, Z)
    concept_direction: np.ndarray | None = None  # float64 (d_c,), unit norm


def _ellipsoid_mask(grid_dims, n_voxels: int) -> np.ndarray:
    """Contiguous ellipsoidal blob with exactly n_voxels set, centered on the
    grid; ties in the ellipsoidal distance break by raster index."""
    x, y, z = grid_dims
    cx, cy, cz = (x - 1) / 2.0, (y - 1) / 2.0, (z - 1) / 2.0
    gx = ((np.arange(x) - cx) / x) ** 2
    gy = ((np.arange(y) - cy) / y) ** 2
    gz = ((np.arange(z) - cz) / z) ** 2
    dist = gx[:, None, None] + gy[None, :, None] + gz[None, None, :]
    order = np.argsort(dist.ravel(), kind="stable")
    mask = np.zeros(x * y * z, dtype=bool)
    mask[order[:n_voxels]] = True
    return mask.reshape((x, y, z))


def generate_synthetic_world(seed: int, embed_dim: int, latent_dim: int,
                             grid_dims, mask_fraction: float,
                             noise_sigma: float, latent_k: int = 16) -> SyntheticWorld:
    """Deterministic desk-scale world. The mask covers exactly
    floor(mask_fraction * X*Y*Z) voxels as an ellipsoidal blob."""
    grid_dims = tuple(int(d) for d in grid_dims)
    if any(d <= 0 for d in grid_dims):
        raise ValidationError(f"degenerate grid dims {grid_dims}")
    if not (0.0 < mask_fraction <= 1.0):
        raise ValidationError(f"mask_fraction must be in (0, 1], got {mask_fraction}")
    if noise_sigma < 0:
        raise ValidationError("noise_sigma must be nonnegative")
    total = math.prod(grid_dims)
    m = int(math.floor(mask_fraction * total))
    if m < 1:
        raise ValidationError(f"mask_fraction {mask_fraction} selects zero voxels")
    mask = _ellipsoid_mask(grid_dims, m)

    rng = np.random.default_rng([_STREAM_WORLD, seed])
    loadings = rng.standard_normal((m, latent_k))
    # unit component variance for the targets keeps desk-size models in a
    # well-conditioned regression regime
    scale = 1.0 / math.sqrt(latent_k)
    embed_proj = rng.standard_normal((embed_dim, latent_k)) * scale
    latent_proj = rng.standard_normal((latent_dim, latent_k)) * scale
    return SyntheticWorld(
        seed=seed, embed_dim=embed_dim, latent_dim=latent_dim, latent_k=latent_k,
        grid_dims=grid_dims, mask=mask, n_mask_voxels=m, noise_sigma=noise_sigma,
        voxel_loadings=loadings, embed_proj=embed_proj, latent_proj=latent_proj,
    )


def generate_planted_world(seed: int, concept: str, concept_direction,
                           embed_dim: int, latent_dim: int, grid_dims,
                           noise_sigma: float, latent_k: int = 16,
                           concept_gain: float = 3.0,
                           octant_loading_gain: float = 3.0,
                           offdirection_gain: float = 0.2) -> SyntheticWorld:
    """World with a planted concept: the component of the embedding target
    along `concept_direction` is driven only by latent coordinate 0, and only
    voxels in the low corner octant carry that coordinate. The mask covers the
    whole grid so octant concentration cannot come from mask filtering.

    `offdirection_gain` keeps the non-concept embedding coordinates
    low-amplitude, which makes the similarity score's gradient concentrate on
    the concept channel instead of the embedding norm."""
    grid_dims = tuple(int(d) for d in grid_dims)
    if any(d <= 0 for d in grid_dims):
        raise ValidationError(f"degenerate grid dims {grid_dims}")
    direction = np.asarray(concept_direction, dtype=np.float64)
    norm = float(np.linalg.norm(direction))
    if direction.shape != (embed_dim,) or norm == 0.0:
        raise ValidationError("concept_direction must be a nonzero vector of length embed_dim")
    direction = direction / norm

    x, y, z = grid_dims
    total = x * y * z
    mask = np.ones(grid_dims, dtype=bool)
    octant = np.zeros(grid_dims, dtype=bool)
    octant[: x // 2, : y // 2, : z // 2] = True

    rng = np.random.default_rng([_STREAM_WORLD, seed])
    loadings = rng.standard_normal((total, latent_k))
    scale = 1.0 / math.sqrt(latent_k)
    embed_proj = rng.standard_normal((embed_dim, latent_k)) * scale
    latent_proj = rng.standard_normal((latent_dim, latent_k)) * scale

    # Embedding target: direction * (gain * u0) + off-direction mix of u[1:].
    embed_proj[:, 0] = 0.0
    embed_proj -= np.outer(direction, direction @ embed_proj)
    embed_proj *= offdirection_gain
    embed_proj[:, 0] = concept_gain * direction

    # Voxel loadings: latent coordinate 0 lives only in the octant; the rest
    # of the grid carries the remaining coordinates. Octant loadings are a
    # zero-mean pattern (a mean offset would leak the concept coordinate into
    # every voxel through per-volume normalization) boosted for salience.
    # Octant loadings are a zero-mean pattern (a mean offset would leak the
    # concept into every voxel through per-volume normalization).
    flat_octant = octant.ravel()
    n_octant = int(flat_octant.sum())
    loadings[~flat_octant, 0] = 0.0
    loadings[flat_octant, 1:] = 0.0
    loadings[flat_octant, 0] = octant_loading_gain * rng.standard_normal(n_octant)

    return SyntheticWorld(
        seed=seed, embed_dim=embed_dim, latent_dim=latent_dim, latent_k=latent_k,
        grid_dims=grid_dims, mask=mask, n_mask_voxels=total, noise_sigma=noise_sigma,
        voxel_loadings=loadings, embed_proj=embed_proj, latent_proj=latent_proj,
        concept=concept, concept_region=octant, concept_direction=direction,
    )


def stimulus_latent(world: SyntheticWorld, stimulus_seed: int) -> np.ndarray:
    rng = np.random.default_rng([_STREAM_STIM, world.seed, int(stimulus_seed)])
    return rng.standard_normal(world.latent_k)


def concept_strength(world: SyntheticWorld, stimulus_seed: int) -> float:
    """How strongly a planted-world stimulus expresses the concept (latent
    coordinate 0; positive means the concept is present)."""
    if world.concept_direction is None:
        raise ValidationError("concept_strength needs a planted world")
    return float(stimulus_latent(world, stimulus_seed)[0])


def stimulus_id_for(stimulus_seed: int) -> str:
    return f"stim{int(stimulus_seed):05d}"


def stimulus_object(stimulus_seed: int) -> str:
    return OBJECT_VOCAB[int(stimulus_seed) % len(OBJECT_VOCAB)]


def synthetic_captions(stimulus_seed: int) -> list[str]:
    obj = stimulus_object(stimulus_seed)
    scene = OBJECT_VOCAB[(int(stimulus_seed) // len(OBJECT_VOCAB) + 7) % len(OBJECT_VOCAB)]
    return [
        f"a photo of a {obj}",
        f"a plain scene with a {obj} near a {scene}",
    ]


def stimulus_targets_for(world: SyntheticWorld, stimulus_seed: int) -> StimulusTargets:
    """Noise-free per-stimulus targets (shared by all trials)."""
    u = stimulus_latent(world, stimulus_seed)
    raw = world.embed_proj @ u
    if world.concept_direction is None:
        embed = raw / np.linalg.norm(raw)
    else:
        embed = raw  # planted world keeps the concept component unscaled
    latent = world.latent_proj @ u
    return StimulusTargets(
        stimulus_id=stimulus_id_for(stimulus_seed),
        image_embed=embed.astype(np.float32),
        image_latent=latent.astype(np.float32),
        captions=synthetic_captions(stimulus_seed),
    )


def noiseless_masked_signal(world: SyntheticWorld, stimulus_seed: int) -> np.ndarray:
    u = stimulus_latent(world, stimulus_seed)
    return world.voxel_loadings @ u


def sample_synthetic_trial(world: SyntheticWorld, stimulus_seed: int,
                           trial_index: int) -> tuple[BrainVolume, StimulusTargets]:
    """Draw one trial: masked voxels respond linearly to the stimulus latent
    plus trial noise; voxels outside the mask are pure N(0,1) distractors."""
    if trial_index < 0:
        raise ValidationError("trial_index must be nonnegative")
    targets = stimulus_targets_for(world, stimulus_seed)
    signal = noiseless_masked_signal(world, stimulus_seed)

    noise_rng = np.random.default_rng(
        [_STREAM_NOISE, world.seed, int(stimulus_seed), int(trial_index)]
    )
    masked = signal + world.noise_sigma * noise_rng.standard_normal(world.n_mask_voxels)

    data = np.empty(world.grid_dims, dtype=np.float64)
    n_outside = data.size - world.n_mask_voxels
    if n_outside:
        bg_rng = np.random.default_rng(
            [_STREAM_BACKGROUND, world.seed, int(stimulus_seed), int(trial_index)]
        )
        data[~world.mask] = bg_rng.standard_normal(n_outside)
    data[world.mask] = masked
    volume = BrainVolume(subject_id=world.subject_id, data=data.astype(np.float32))
    return volume, targets


def mask_volume(world: SyntheticWorld) -> BrainVolume:
    """The world mask as a 0/1 volume (for NVOL1 export)."""
    return BrainVolume(subject_id=world.subject_id,
                       data=world.mask.astype(np.float32))
