"""Dataset-level plumbing shared by the CLI and the reproduction script:
synthetic dataset materialization, batch preprocessing of manifests, and
loading preprocessed directories back into training structures."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import bridge as br
from . import preprocess as pp
from . import volume_io as vio
from .encoder import AlignmentDataset, build_alignment_dataset
from .errors import ValidationError
from .imaging import write_ppm
from .reconstructor import DecoderHandle, make_bundle, reconstruct


def derive_seed(root_seed: int, stage: str) -> int:
    """Documented per-stage fan-out: sha256 of '<root>:<stage>', low 8 bytes,
    reduced into the positive int32 range."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)


def materialize_synth_dataset(world: vio.SyntheticWorld, out_dir,
                              n_train: int, n_test: int, trials: int,
                              render_truth: int = 0,
                              conversation_kinds=("brief",),
                              conversation_seed: int = 0,
                              decoder_seed: int = 0,
                              truth_size: tuple[int, int] = (64, 64)) -> dict:
    """Write volumes, targets store, manifests, and the world mask under
    out_dir. Train stimuli take stimulus seeds 0..n_train-1, test stimuli
    follow. Returns the path map."""
    if n_train < 1 or n_test < 0 or trials < 1:
        raise ValidationError("need at least one training stimulus and one trial")
    out = Path(out_dir)
    vol_dir = out / "volumes"
    store = out / "targets"
    vol_dir.mkdir(parents=True, exist_ok=True)
    store.mkdir(parents=True, exist_ok=True)

    truth_decoder = DecoderHandle(seed=decoder_seed, output_size=truth_size)
    splits = {"train": range(n_train), "test": range(n_train, n_train + n_test)}
    manifests = {}
    for split, stim_seeds in splits.items():
        records = []
        for s in stim_seeds:
            targets = None
            for t in range(trials):
                volume, targets = vio.sample_synthetic_trial(world, s, t)
                rec_id = f"{targets.stimulus_id}-t{t}"
                path = vol_dir / f"{rec_id}.nvol"
                vio.write_volume(volume, path)
                records.append(vio.ManifestRecord(
                    record_id=rec_id,
                    subject_id=world.subject_id,
                    volume_path=str(path.relative_to(out)),
                    stimulus_id=targets.stimulus_id,
                    trial_index=t,
                ))
            vio.save_targets(store, targets)
            if render_truth and (s - (0 if split == "train" else n_train)) < render_truth:
                bundle = make_bundle(targets.image_latent, targets.image_embed,
                                     targets.captions[0], beta=0.0, noise_seed=s)
                write_ppm(store / targets.stimulus_id / "image.ppm",
                          reconstruct(truth_decoder, bundle))
        manifest = vio.DatasetManifest(records=records, targets_path="targets")
        man_path = out / f"manifest_{split}.jsonl"
        vio.write_manifest(manifest, man_path)
        manifests[split] = man_path

    mask_path = out / "mask.nvol"
    vio.write_volume(vio.mask_volume(world), mask_path)

    conv_count = 0
    if conversation_kinds:
        records, _ = br.build_instruction_dataset(store, kinds=conversation_kinds,
                                                  seed=conversation_seed)
        for rec in records:
            br.save_conversation(store / rec.stimulus_id / "conversations", rec)
        conv_count = len(records)

    return {"root": out, "train_manifest": manifests["train"],
            "test_manifest": manifests["test"], "mask": mask_path,
            "targets": store, "conversations": conv_count}


def canonical_mask_from_volume(mask_volume: vio.BrainVolume,
                               canonical_dims) -> pp.TaskMask:
    """Resample a 0/1 mask volume into canonical space (trilinear, then 0.5
    threshold)."""
    resized = pp.trilinear_resize(mask_volume, canonical_dims)
    return pp.TaskMask.from_volume(resized, threshold=0.5)


def preprocess_manifest(manifest_path, mask_volume_path, spec: pp.PatchSpec,
                        out_dir, normalize: bool = True) -> Path:
    """Resize, normalize, and patchify every record of a manifest; writes one
    .npat per record plus an index and the canonical mask."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    manifest = vio.read_manifest(manifest_path)
    manifest.validate_against_store(base)
    mask = canonical_mask_from_volume(vio.read_volume(mask_volume_path),
                                      spec.canonical_dims)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    index = []
    for rec in manifest.records:
        volume = vio.read_volume(base / rec.volume_path, subject_id=rec.subject_id)
        volume = pp.trilinear_resize(volume, spec.canonical_dims)
        if normalize:
            volume = pp.normalize(volume, mask)
        signal = pp.patchify(volume, spec, mask, provenance=rec.record_id)
        npat_path = out / f"{rec.record_id}.npat"
        pp.write_patched(signal, npat_path)
        index.append({
            "record_id": rec.record_id,
            "npat": npat_path.name,
            "stimulus_id": rec.stimulus_id,
            "subject_id": rec.subject_id,
            "trial_index": rec.trial_index,
        })
    mask_vol = vio.BrainVolume("", mask.data.astype(np.float32))
    vio.write_volume(mask_vol, out / "mask_canonical.nvol")
    header = {
        "targets_path": str((base / manifest.targets_path).resolve()),
        "patch_edge": spec.edge,
        "canonical_dims": list(spec.canonical_dims),
        "retain_threshold": spec.retain_threshold,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(e, sort_keys=True) for e in index]
    (out / "index.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_preprocessed(prep_dir) -> tuple[dict, list[dict], dict[str, pp.PatchedSignal]]:
    """Read a preprocessed directory back: (header, index entries, signals by
    record id)."""
    prep = Path(prep_dir)
    lines = (prep / "index.jsonl").read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    entries = [json.loads(ln) for ln in lines[1:]]
    signals = {}
    for e in entries:
        signals[e["record_id"]] = pp.read_patched(
            prep / e["npat"], retain_threshold=header.get("retain_threshold", 1)
        )
    return header, entries, signals


def alignment_dataset_from_dir(prep_dir, embed_dim: int,
                               latent_dim: int) -> AlignmentDataset:
    header, entries, signals = load_preprocessed(prep_dir)
    store = Path(header["targets_path"])
    sigs, targets, subjects, record_ids = [], [], [], []
    for e in entries:
        sigs.append(signals[e["record_id"]])
        targets.append(vio.load_targets(store, e["stimulus_id"],
                                        embed_dim=embed_dim, latent_dim=latent_dim))
        subjects.append(e["subject_id"])
        record_ids.append(e["record_id"])
    return build_alignment_dataset(sigs, targets, subjects, record_ids)


def trial_averaged_signals(prep_dir) -> tuple[dict[str, pp.PatchedSignal], dict]:
    """Average each stimulus's trials in patch space (trials share one layout
    because patching is deterministic given the mask)."""
    header, entries, signals = load_preprocessed(prep_dir)
    by_stim: dict[str, list] = {}
    for e in entries:
        by_stim.setdefault(e["stimulus_id"], []).append(e["record_id"])
    averaged = {}
    for stim, rec_ids in sorted(by_stim.items()):
        sigs = [signals[r] for r in sorted(rec_ids)]
        base = sigs[0]
        mean = np.mean([s.values.astype(np.float64) for s in sigs], axis=0)
        averaged[stim] = pp.PatchedSignal(
            values=mean.astype(np.float32), index_map=base.index_map,
            spec=base.spec, provenance=f"{stim}-avg",
        )
    return averaged, header


def first_trial_signals(prep_dir) -> tuple[dict[str, pp.PatchedSignal], dict]:
    header, entries, signals = load_preprocessed(prep_dir)
    chosen = {}
    for e in entries:
        if e["trial_index"] == 0:
            chosen[e["stimulus_id"]] = signals[e["record_id"]]
    return chosen, header


def load_targets_matrix(store_dir, stimulus_ids, embed_dim, latent_dim):
    embeds, latents = [], []
    for sid in stimulus_ids:
        t = vio.load_targets(store_dir, sid, embed_dim=embed_dim, latent_dim=latent_dim)
        embeds.append(t.image_embed)
        latents.append(t.image_latent)
    return np.stack(embeds), np.stack(latents)


def validate_dataset_layout(entries) -> None:
    if not entries:
        raise ValidationError("preprocessed dataset is empty")
