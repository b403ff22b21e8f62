"""Command-line orchestration: configuration, subcommand dispatch, run
directories, and the end-to-end desk-scale reproduction.

Every run appends a ``run.json`` (config echo, seed, versions, wall time)
under ``<workdir>/runs/``; run directories are never overwritten. Exit codes:
0 success, 2 usage, otherwise a nonzero code with a one-line
``error category=<cat>`` message on stderr. ``VOXELBRIDGE_THREADS`` caps the
math thread pools.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import RunConfig
from .errors import ValidationError, VoxelbridgeError

_EXIT_BY_CATEGORY = {
    "validation": 3,
    "validation.nonfinite": 3,
    "format": 4,
    "format.magic": 4,
    "format.payload": 4,
    "capability": 5,
}


def _cap_threads() -> int:
    import torch

    n = int(os.environ.get("VOXELBRIDGE_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    return n


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.set("seed", args.seed)
    return config


def _next_run_dir(workdir: Path, command: str) -> Path:
    runs = workdir / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    seq = 0
    while True:
        candidate = runs / f"{seq:04d}-{command}"
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            seq += 1


def _write_run_record(run_dir: Path, command: str, argv, config: RunConfig,
                      started: float, extra: dict | None = None) -> None:
    import numpy as np
    import torch

    from . import __version__, _kernels

    record = {
        "command": command,
        "argv": list(argv),
        "config": config.effective(),
        "seed": config["seed"],
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
            "voxelbridge": __version__,
            "kernel_engine": _kernels.ENGINE,
        },
        "wall_time_s": round(time.time() - started, 3),
    }
    record.update(extra or {})
    (run_dir / "run.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"expected comma-separated integers, got {text!r}") from exc
    if any(d <= 0 for d in dims):
        raise ValidationError(f"dimensions must be positive, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# Subcommand implementations


def cmd_synth(args, config: RunConfig) -> int:
    from . import pipeline as pl
    from . import volume_io as vio
    from .embedders import EmbedderSpec, embed_text

    seed = config["seed"]
    if args.planted_concept:
        text_spec = EmbedderSpec(kind="text_embedding", dim=config["embed_dim"], seed=0)
        world = vio.generate_planted_world(
            seed=pl.derive_seed(seed, "world"), concept=args.planted_concept,
            concept_direction=embed_text(text_spec, args.planted_concept),
            embed_dim=config["embed_dim"], latent_dim=config["latent_dim"],
            grid_dims=_dims(args.grid), noise_sigma=args.noise_sigma,
            latent_k=config["latent_k"],
        )
    else:
        world = vio.generate_synthetic_world(
            seed=pl.derive_seed(seed, "world"), embed_dim=config["embed_dim"],
            latent_dim=config["latent_dim"], grid_dims=_dims(args.grid),
            mask_fraction=args.mask_fraction, noise_sigma=args.noise_sigma,
            latent_k=config["latent_k"],
        )
    paths = pl.materialize_synth_dataset(
        world, args.out, n_train=args.n_train, n_test=args.n_test,
        trials=args.trials, render_truth=args.render_truth,
        conversation_kinds=("brief", "detailed", "recon_prompt", "concept_loc"),
        conversation_seed=pl.derive_seed(seed, "conversations"),
        decoder_seed=config["decoder_seed"],
        truth_size=tuple(config.dims("decoder_size")),
    )
    print(f"world grid={world.grid_dims} mask_voxels={world.n_mask_voxels} "
          f"train={args.n_train} test={args.n_test} trials={args.trials} "
          f"conversations={paths['conversations']}")
    print(f"wrote {paths['root']}")
    return 0


def cmd_preprocess(args, config: RunConfig) -> int:
    from . import pipeline as pl
    from .preprocess import PatchSpec

    spec = PatchSpec(
        edge=args.r if args.r else config["patch_edge"],
        canonical_dims=_dims(args.canonical) if args.canonical
        else config.dims("canonical_dims"),
        retain_threshold=config["retain_threshold"],
    )
    out = pl.preprocess_manifest(args.infile, args.mask, spec, args.out)
    n = len((out / "index.jsonl").read_text(encoding="utf-8").splitlines()) - 1
    print(f"preprocessed {n} records -> {out} (grid {spec.grid_dims}, C={spec.patch_len})")
    return 0


def cmd_train_align(args, config: RunConfig) -> int:
    import numpy as np

    from . import encoder as enc
    from . import pipeline as pl
    from .preprocess import PatchSpec

    header, entries, _ = pl.load_preprocessed(args.data)
    pl.validate_dataset_layout(entries)
    spec = PatchSpec(edge=header["patch_edge"],
                     canonical_dims=tuple(header["canonical_dims"]))
    dataset = pl.alignment_dataset_from_dir(args.data, config["embed_dim"],
                                            config["latent_dim"])
    enc_config = enc.EncoderConfig(
        patch_dim=spec.patch_len,
        pos_table_size=int(np.prod(spec.grid_dims)),
        embed_dim=config["embed_dim"], latent_dim=config["latent_dim"],
        n_layers=args.layers or config["enc_layers"],
        hidden=args.hidden or config["enc_hidden"],
        n_heads=config["enc_heads"], mlp_ratio=config["enc_mlp_ratio"],
        head_hidden=config["head_hidden"], alpha=config["alpha"],
        dropout=config["dropout"],
    )
    schedule = enc.TrainSchedule(
        lr=config["lr_align"],
        epochs=args.epochs or config["epochs_align"],
        batch=config["batch_align"],
        seed=pl.derive_seed(config["seed"], "align"),
        mixup=config["mixup"], val_fraction=config["val_fraction"],
    )
    model, meta = enc.train_alignment(dataset, enc_config, schedule)
    enc.save_encoder(model, args.out, meta=meta)
    print(f"trained {enc_config.n_layers}x{enc_config.hidden} on "
          f"{dataset.n_samples} samples; final loss {meta['final_train_loss']:.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_embed(args, config: RunConfig) -> int:
    import numpy as np

    from . import encoder as enc
    from .preprocess import read_patched

    model, _ = enc.load_encoder(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for npat in args.infiles:
        signal = read_patched(npat)
        trace = enc.forward(model, signal, want_trace=False)
        stem = Path(npat).stem
        trace.pred_embed.numpy().astype("<f4").tofile(out / f"{stem}.pred_c.f32")
        trace.pred_latent.numpy().astype("<f4").tofile(out / f"{stem}.pred_v.f32")
    print(f"embedded {len(args.infiles)} records -> {out}")
    return 0


def _bridge_samples(data_dir, encoder_ckpt, config: RunConfig):
    """Pair each stored conversation with the penultimate states of its
    stimulus's first trial."""
    from . import bridge as br
    from . import encoder as enc
    from . import pipeline as pl

    model, _ = enc.load_encoder(encoder_ckpt)
    first, header = pl.first_trial_signals(data_dir)
    store = Path(header["targets_path"])
    samples = []
    for sid in sorted(first):
        conv_dir = store / sid / "conversations"
        if not conv_dir.is_dir():
            continue
        trace = enc.forward(model, first[sid], want_trace=True)
        penultimate = trace.penultimate.numpy()
        for conv_file in sorted(conv_dir.glob("*.json")):
            samples.append((penultimate, br.load_conversation(conv_file)))
    if not samples:
        raise ValidationError(f"no conversations found under {store}")
    return model, samples


def cmd_train_bridge(args, config: RunConfig) -> int:
    from . import bridge as br
    from . import pipeline as pl

    model, samples = _bridge_samples(args.data, args.encoder, config)
    if args.init:
        state, _ = br.load_bridge(args.init)
    else:
        handle = br.LanguageModelHandle.tiny(
            br.TinyLMConfig(vocab_size=config["lm_vocab"], n_layers=config["lm_layers"],
                            width=config["lm_width"], n_heads=config["lm_heads"],
                            max_len=config["lm_max_len"]),
            seed=pl.derive_seed(config["seed"], "lm"),
        )
        state = br.BridgeState(model.config.hidden, handle,
                               seed=pl.derive_seed(config["seed"], "bridge"))
    schedule = br.BridgeSchedule(
        lr=args.lr if args.lr is not None else config["lr_bridge"],
        epochs=args.epochs or config["epochs_bridge"],
        batch=config["batch_bridge"],
        seed=pl.derive_seed(config["seed"], f"bridge-stage{args.stage}"),
    )
    meta = br.train_bridge(state, samples, stage=args.stage, schedule=schedule)
    accuracy = br.answer_token_accuracy(state, samples)
    meta["answer_token_accuracy"] = accuracy
    br.save_bridge(state, args.out, meta=meta)
    print(f"stage {args.stage} on {len(samples)} conversations; "
          f"answer-token accuracy {accuracy:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_chat(args, config: RunConfig) -> int:
    from . import bridge as br
    from . import encoder as enc
    from .preprocess import read_patched

    model, _ = enc.load_encoder(args.encoder)
    state, _ = br.load_bridge(args.ckpt)
    signal = read_patched(args.fmri)
    trace = enc.forward(model, signal, want_trace=True)
    reply = br.generate(state, trace.penultimate.numpy(), args.instruction,
                        max_tokens=args.max_tokens)
    print(reply)
    return 0


def cmd_reconstruct(args, config: RunConfig) -> int:
    from . import bridge as br
    from . import encoder as enc
    from . import reconstructor as rc
    from .imaging import write_image
    from .preprocess import read_patched

    model, _ = enc.load_encoder(args.encoder)
    bridge_state = None
    if not args.no_llm:
        if not args.bridge:
            raise ValidationError("pass --bridge <ckpt> or --no-llm")
        bridge_state, _ = br.load_bridge(args.bridge)
    beta = args.beta if args.beta is not None else config["beta"]
    decoder = rc.DecoderHandle(seed=config["decoder_seed"],
                               output_size=tuple(config.dims("decoder_size")))
    signal = read_patched(args.fmri)
    image, prompt = rc.recon_pipeline(model, bridge_state, decoder, signal,
                                      beta=beta, noise_seed=args.seed or 0)
    write_image(args.out, image)
    print(f"beta={beta} prompt={prompt!r}")
    print(f"wrote {args.out}")
    return 0


def cmd_localize(args, config: RunConfig) -> int:
    import numpy as np

    from . import encoder as enc
    from . import localizer as loc
    from . import pipeline as pl
    from . import preprocess as pp
    from . import volume_io as vio
    from .embedders import EmbedderSpec
    from .imaging import montage_axial, write_ppm

    ckpts = [c for c in (args.ckpt14, args.ckpt12, args.ckpt10) if c]
    ckpts += args.ckpt or []
    if not ckpts:
        raise ValidationError("pass at least one checkpoint (--ckpt14/--ckpt12/--ckpt10/--ckpt)")
    canonical = _dims(args.canonical) if args.canonical else config.dims("canonical_dims")
    volume = vio.read_volume(args.infile)
    mask = pl.canonical_mask_from_volume(vio.read_volume(args.mask), canonical)

    scales = []
    for ckpt in ckpts:
        model, _ = enc.load_encoder(ckpt)
        edge = round(model.config.patch_dim ** (1.0 / 3.0))
        if edge**3 != model.config.patch_dim:
            raise ValidationError(f"{ckpt}: patch length {model.config.patch_dim} "
                                  "is not a cube")
        spec = pp.PatchSpec(edge=edge, canonical_dims=canonical,
                            retain_threshold=config["retain_threshold"])
        vol_c = pp.trilinear_resize(volume, canonical)
        vol_c = pp.normalize(vol_c, mask)
        scales.append((model, pp.patchify(vol_c, spec, mask,
                                          provenance=Path(args.infile).stem)))
    text_spec = EmbedderSpec(kind="text_embedding", dim=scales[0][0].config.embed_dim,
                             seed=0)
    heat = loc.localize(scales, args.concept, text_spec,
                        layer=args.layer if args.layer > 0 else None)
    loc.export_heatmap(heat, args.out, {"tau": config["tau"]})
    if args.montage:
        write_ppm(args.montage, montage_axial(heat.values.astype(np.float64)))
    print(f"concept={args.concept!r} scales={heat.scales_used} "
          f"peak={float(heat.values.max()):.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_nullify(args, config: RunConfig) -> int:
    from . import localizer as loc
    from . import volume_io as vio

    volume = vio.read_volume(args.infile)
    heat = loc.load_heatmap(args.heat)
    tau = args.tau if args.tau is not None else config["tau"]
    out = loc.nullify(volume, heat, tau)
    vio.write_volume(out, args.out)
    zeroed = int((out.data != volume.data).sum())
    print(f"zeroed {zeroed} voxels at tau={tau}")
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args, config: RunConfig) -> int:
    from . import evalsuite as ev
    from .embedders import EmbedderSpec

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    resolution = _dims(args.resolution) if args.resolution else config.dims("eval_resolution")
    spec = EmbedderSpec(kind="image_embedding", dim=config["embed_dim"],
                        seed=config["decoder_seed"])
    report = ev.evaluate_image_dirs(args.recon, args.truth, metrics, spec=spec,
                                    resolution=resolution, seed=config["seed"])
    Path(args.out).write_text(ev.render_report(report), encoding="utf-8")
    for name, value in report["aggregate"].items():
        print(f"{name}: {value:.6f}")
    print(f"wrote {args.out}")
    return 0


def cmd_repro(args, config: RunConfig) -> int:
    from .acceptance import run_repro

    report = run_repro(seed=config["seed"], workdir=args.run_dir)
    print(f"artifacts under {args.run_dir}")
    return 0 if report["all_passed"] else 1


def cmd_config_docs(args, config: RunConfig) -> int:
    print(RunConfig.documentation())
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelbridge",
        description="Desk-scale fMRI visual decoding: synthetic worlds, patch "
                    "preprocessing, dual-aligned extraction, language bridging, "
                    "reconstruction, localization, and evaluation.",
    )
    parser.add_argument("--workdir", default=".", help="base directory for run records")
    parser.add_argument("--config", default=None, help="key=value config file")
    # --workdir/--config are also accepted after the subcommand name
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--workdir", default=argparse.SUPPRESS,
                        help="base directory for run records")
    shared.add_argument("--config", default=argparse.SUPPRESS,
                        help="key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str):
        return sub.add_parser(
            name, parents=[shared],
            formatter_class=argparse.ArgumentDefaultsHelpFormatter, help=help_text)


    p = add_command("synth", "generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=None, help="root seed (default from config)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n-train", type=int, default=256, help="training stimuli")
    p.add_argument("--n-test", type=int, default=64, help="held-out stimuli")
    p.add_argument("--trials", type=int, default=3, help="trials per stimulus")
    p.add_argument("--grid", default="20,24,18", help="subject-space dims X,Y,Z")
    p.add_argument("--mask-fraction", type=float, default=0.3,
                   help="fraction of voxels inside the task mask")
    p.add_argument("--noise-sigma", type=float, default=0.5, help="trial noise sigma")
    p.add_argument("--planted-concept", default=None,
                   help="build a planted-concept world for this concept instead")
    p.add_argument("--render-truth", type=int, default=0,
                   help="render ground-truth images for the first N stimuli per split")
    p.set_defaults(func=cmd_synth)

    p = add_command("preprocess", "resample, normalize, and patchify a manifest")
    p.add_argument("--in", dest="infile", required=True, help="dataset manifest")
    p.add_argument("--mask", required=True, help="mask volume (NVOL1, 0/1)")
    p.add_argument("--r", type=int, default=0, help="patch edge (default from config)")
    p.add_argument("--canonical", default=None, help="canonical dims X,Y,Z")
    p.add_argument("--out", required=True, help="output directory for .npat files")
    p.set_defaults(func=cmd_preprocess)

    p = add_command("train-align", "train the dual-aligned extractor")
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--seed", type=int, default=None, help="root seed")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, default=0, help="override config epochs")
    p.add_argument("--layers", type=int, default=0, help="override encoder depth")
    p.add_argument("--hidden", type=int, default=0, help="override encoder width")
    p.set_defaults(func=cmd_train_align)

    p = add_command("embed", "write predicted embeddings for .npat files")
    p.add_argument("--ckpt", required=True, help="extractor checkpoint")
    p.add_argument("--in", dest="infiles", nargs="+", required=True, help=".npat files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_embed)

    p = add_command("train-bridge", "train the language bridge")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True,
                   help="1: projector only, 2: joint with the language model")
    p.add_argument("--encoder", required=True, help="frozen extractor checkpoint")
    p.add_argument("--data", required=True, help="preprocessed directory")
    p.add_argument("--init", default=None, help="bridge checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None, help="root seed")
    p.add_argument("--epochs", type=int, default=0, help="override config epochs")
    p.add_argument("--lr", type=float, default=None, help="override config learning rate")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=cmd_train_bridge)

    p = add_command("chat", "answer an instruction from an fMRI recording")
    p.add_argument("--ckpt", required=True, help="bridge checkpoint")
    p.add_argument("--encoder", required=True, help="extractor checkpoint")
    p.add_argument("--fmri", required=True, help=".npat file")
    p.add_argument("--instruction", required=True, help="natural-language instruction")
    p.add_argument("--max-tokens", type=int, default=64, help="decoding budget")
    p.set_defaults(func=cmd_chat)

    p = add_command("reconstruct", "reconstruct an image from an fMRI recording")
    p.add_argument("--fmri", required=True, help=".npat file")
    p.add_argument("--encoder", required=True, help="extractor checkpoint")
    p.add_argument("--bridge", default=None, help="bridge checkpoint (prompt source)")
    p.add_argument("--beta", type=float, default=None,
                   help="noise share in the latent mix (default from config)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--out", required=True, help="output image (.ppm or .png)")
    p.add_argument("--no-llm", action="store_true", help="skip the prompt (empty a_r)")
    p.set_defaults(func=cmd_reconstruct)

    p = add_command("localize", "localize a text concept in a volume")
    p.add_argument("--concept", required=True, help="concept string")
    p.add_argument("--ckpt14", default=None, help="extractor checkpoint (r=14)")
    p.add_argument("--ckpt12", default=None, help="extractor checkpoint (r=12)")
    p.add_argument("--ckpt10", default=None, help="extractor checkpoint (r=10)")
    p.add_argument("--ckpt", action="append", default=None,
                   help="extra extractor checkpoint (any patch edge; repeatable)")
    p.add_argument("--in", dest="infile", required=True, help="subject volume (NVOL1)")
    p.add_argument("--mask", required=True, help="mask volume (NVOL1)")
    p.add_argument("--canonical", default=None, help="canonical dims X,Y,Z")
    p.add_argument("--layer", type=int, default=0,
                   help="transformer block to probe (default: penultimate)")
    p.add_argument("--montage", default=None, help="optional axial montage PPM")
    p.add_argument("--out", required=True, help="heatmap output (NVOL1)")
    p.set_defaults(func=cmd_localize)

    p = add_command("nullify", "zero the voxels implicated by a heatmap")
    p.add_argument("--heat", required=True, help="heatmap volume (NVOL1)")
    p.add_argument("--tau", type=float, default=None,
                   help="percentile threshold (default from config)")
    p.add_argument("--in", dest="infile", required=True, help="volume to modify")
    p.add_argument("--out", required=True, help="output volume")
    p.set_defaults(func=cmd_nullify)

    p = add_command("evaluate", "score reconstructions against truth images")
    p.add_argument("--recon", required=True, help="directory of reconstructed images")
    p.add_argument("--truth", required=True, help="directory of ground-truth images")
    p.add_argument("--metrics", default="pixcorr,ssim,twoway",
                   help="comma list from pixcorr,ssim,twoway")
    p.add_argument("--resolution", default=None, help="protocol resolution H,W")
    p.add_argument("--out", required=True, help="report path (JSON)")
    p.set_defaults(func=cmd_evaluate)

    p = add_command("repro", "run the full synthetic pipeline and acceptance gate")
    p.add_argument("--seed", type=int, default=7, help="root seed")
    p.set_defaults(func=cmd_repro)

    p = add_command("config-docs", "print every config key with its default")
    p.set_defaults(func=cmd_config_docs)

    return parser


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    _cap_threads()
    started = time.time()
    workdir = Path(args.workdir)
    try:
        config = _load_config(args)
        args.run_dir = _next_run_dir(workdir, args.command)
        code = args.func(args, config)
        _write_run_record(args.run_dir, args.command, argv, config, started)
        return code
    except VoxelbridgeError as exc:
        print(f"error category={exc.category} {exc}", file=sys.stderr)
        return _EXIT_BY_CATEGORY.get(exc.category, 1)
    except FileNotFoundError as exc:
        print(f"error category=io {exc}", file=sys.stderr)
        return 6


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
