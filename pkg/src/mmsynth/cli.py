"""Command line front end.

Verbs: generate, train-codec, train-diffusion, synthesize, evaluate,
ablate, denoise. Every verb accepts --config (flat YAML) and --seed,
and writes a run.json stamped with the resolved config hash so reruns
are traceable. Grid files passed to synthesize/denoise are .npy arrays.
"""

from __future__ import annotations

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .codec import CodecTrainConfig, load_codec, save_codec, train_codec
from .config import config_hash, load_config
from .coopfilter import FilterPolicy, cooperative_filter
from .dataset import generate_dataset, parse_split_ratio, read_dataset
from .denoiser import load_denoiser
from .phantoms import PhantomConfig
from .pipeline import (
    TrainConfig,
    evaluate,
    plan_ablation,
    run_ablation,
    synthesize,
    train_diffusion,
    write_sample_grid,
)


def _write_run_record(out_dir: Path, verb: str, cfg: dict, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "verb": verb,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **extra,
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, default=str))


def _resolve(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _phantom_config(cfg: dict) -> PhantomConfig:
    return PhantomConfig(
        noise_sigma=cfg["phantom.noise_sigma"],
        bias_amplitude=cfg["phantom.bias_amplitude"],
        bias_smoothness=cfg["phantom.bias_smoothness"],
        tumor_prob=cfg["phantom.tumor_prob"],
        modalities=tuple(cfg["modalities"]),
    )


def _filter_policy(cfg: dict) -> FilterPolicy:
    return FilterPolicy(
        threshold_value=cfg["coop_filter.threshold"],
        block_size=cfg["coop_filter.block_size"],
        match_count=cfg["coop_filter.match_count"],
    )


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    n = args.n or cfg["n_samples"]
    size = args.size or cfg["image_size"]
    dataset = generate_dataset(
        args.out, n, size, seed=cfg["seed"], config=_phantom_config(cfg),
        split_ratio=parse_split_ratio(cfg["split"]), config_hash=config_hash(cfg),
    )
    counts = {k: len(v) for k, v in dataset.manifest.splits.items()}
    print(f"wrote {n} phantoms at {size}x{size} to {args.out} (splits {counts})")
    _write_run_record(Path(args.out), "generate", cfg,
                      {"n_samples": n, "image_size": size, "splits": counts})
    return 0


def cmd_train_codec(args) -> int:
    cfg = _resolve(args)
    dataset = read_dataset(args.data)
    train_cfg = CodecTrainConfig(
        steps=args.steps or cfg["codec.steps"],
        batch_size=cfg["codec.batch_size"],
        lr=cfg["codec.lr"],
        seed=cfg["seed"],
        latent_channels=cfg["codec.latent_channels"],
        kl_weight=cfg["codec.kl_weight"],
        head_gain=cfg["codec.head_gain"],
        channel_dropout=cfg["codec.channel_dropout"],
        channel_dropout_frac=cfg["codec.channel_dropout_frac"],
    )
    codec = train_codec(dataset, train_cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out, config_hash(cfg))
    val = codec.train_history["val_mse"][-1]
    print(f"codec saved to {out} (final val MSE {val:.6f})")
    _write_run_record(out.parent, "train-codec", cfg,
                      {"checkpoint": str(out), "val_mse": val})
    return 0


def _train_config(cfg: dict, args) -> TrainConfig:
    tc = TrainConfig.from_flat(cfg, dataset_root=str(args.data))
    if getattr(args, "steps", None):
        tc = replace(tc, steps=args.steps)
    if getattr(args, "target", None):
        tc = replace(tc, target_modality=args.target)
    return tc


def cmd_train_diffusion(args) -> int:
    cfg = _resolve(args)
    dataset = read_dataset(args.data)
    codec = load_codec(args.codec)
    tc = _train_config(cfg, args)
    state, trace = train_diffusion(tc, codec, dataset, out_dir=args.out,
                                   config_hash=config_hash(cfg))
    final = trace["eps_loss"][-1]
    print(f"trained {tc.steps} steps on '{tc.target_modality}'; "
          f"final noise-prediction loss {final:.4f}; checkpoints in {args.out}")
    _write_run_record(Path(args.out), "train-diffusion", cfg,
                      {"steps": tc.steps, "final_eps_loss": final})
    return 0


def cmd_synthesize(args) -> int:
    cfg = _resolve(args)
    dataset = read_dataset(args.data)
    codec = load_codec(args.codec)
    state = load_denoiser(args.model)
    sample = dataset.load_sample(args.id)
    target = args.target or cfg["target_modality"]
    steps = args.steps or cfg["sample_steps"]
    from .pipeline import pick_sources

    sources = pick_sources(dataset.manifest.modalities, target, cfg["n_inputs"])
    image = synthesize(
        state, codec, sample, target, steps, seed=cfg["seed"], sources=sources,
        structural_guidance=cfg["structural_guidance.enabled"],
        density_source=cfg["density_source"], T=cfg["T"], beta1=cfg["beta1"],
        betaT=cfg["betaT"],
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, image)
    grid_path = out.with_suffix(".png")
    write_sample_grid(sample, image, target, sources, grid_path)
    from .metrics import psnr, ssim

    p = psnr(image, sample.images[target])
    s = ssim(image, sample.images[target])
    print(f"synthesized '{target}' for {args.id}: PSNR {p:.2f} dB, SSIM {s:.4f}; "
          f"saved {out} and {grid_path}")
    _write_run_record(out.parent, "synthesize", cfg,
                      {"sample_id": args.id, "psnr": p, "ssim": s,
                       "output": str(out)})
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    dataset = read_dataset(args.data)
    codec = load_codec(args.codec)
    state = load_denoiser(args.model)
    target = args.target or cfg["target_modality"]
    report = evaluate(
        state, codec, dataset, target, split=args.split,
        sample_steps=args.steps or cfg["sample_steps"], seed=cfg["seed"],
        n_inputs=cfg["n_inputs"],
        structural_guidance=cfg["structural_guidance.enabled"],
        density_source=cfg["density_source"], T=cfg["T"], beta1=cfg["beta1"],
        betaT=cfg["betaT"], limit=args.limit, config_hash=config_hash(cfg),
        out_dir=args.out,
    )
    print(report.summary())
    _write_run_record(Path(args.out), "evaluate", cfg,
                      {"aggregate": report.aggregate(), "split": args.split})
    return 0


def _parse_cells(text: str | None):
    if not text:
        return None
    cells = []
    for token in text.split(","):
        variant, _, k = token.strip().partition(":")
        cells.append({"variant": variant, "n_inputs": int(k or 3)})
    return cells


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    dataset = read_dataset(args.data)
    codec = load_codec(args.codec)
    base = TrainConfig.from_flat(cfg, dataset_root=str(args.data))
    if args.steps:
        base = replace(base, steps=args.steps)
    cells = _parse_cells(args.cells) or plan_ablation()
    report = run_ablation(
        codec, dataset, base, cells=cells, sample_steps=cfg["sample_steps"],
        eval_limit=args.limit, config_hash=config_hash(cfg), out_dir=args.out,
    )
    print(report.format_table())
    _write_run_record(Path(args.out), "ablate", cfg,
                      {"cells": len(report.rows)})
    return 0


def cmd_denoise(args) -> int:
    cfg = _resolve(args)
    grid = np.load(args.infile)
    out = cooperative_filter(grid.astype(np.float32),
                             levels=args.levels or cfg["coop_filter.levels"],
                             policy=_filter_policy(cfg))
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    np.save(out_path, np.asarray(out, dtype=np.float32))
    print(f"filtered grid {grid.shape} -> {out_path}")
    _write_run_record(out_path.parent, "denoise", cfg,
                      {"input": str(args.infile), "output": str(out_path)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmsynth",
        description="Many-to-one modality synthesis on procedural brain phantoms.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="flat YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")

    p = sub.add_parser("generate", help="render a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-codec", help="fit the image/latent codec")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-diffusion", help="fit the latent denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--target", default=None)
    common(p)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("synthesize", help="generate one target modality image")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--target", default=None)
    common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="score synthesis quality on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--limit", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score component-removal variants")
    p.add_argument("--data", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cells", default=None,
                   help="comma list like 'full:3,no_coop:3' (default: full grid)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--limit", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("denoise", help="run the wavelet filter on a .npy grid")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=None)
    common(p)
    p.set_defaults(func=cmd_denoise)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
