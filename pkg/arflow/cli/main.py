"""Command-line entry point."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..flow.bench import DEFAULT_T_LIST, fit_scaling_exponent, read_bench_csv, sweep, write_bench_csv
from ..flow.errors import ARFlowError, ConfigError, ShapeError
from ..flow.evaluation import EvalReport, evaluate, write_eval_csv
from ..flow.fileio import write_text_atomic
from ..flow.logger import configure_logging, get_logger
from ..flow.model import PRESETS, count_params, scaled_preset
from ..flow.sampler import SAMPLER_MODES, SamplerConfig, sample_model
from ..flow.sequence import CategoryDataset, load_dataset, make_dataset, read_latents, save_dataset, write_latents
from ..flow.training import load_checkpoint, read_metrics, run_training
from .config import RunConfig, apply_overrides, config_to_dict, load_run_config
from .images import plot_loss_curves, plot_scaling, sample_grid, write_pgm

LOGGER = get_logger()

ABLATION_KINDS = ("seq-len", "cfg", "steps", "cache")


def _dataset(config: RunConfig, build_missing: bool = True) -> CategoryDataset:
    path = config.resolve(config.data.path)
    if path.exists():
        return load_dataset(path)
    if not build_missing:
        raise ConfigError(f"dataset {path} does not exist; run make-data first")
    ds = make_dataset(config.data)
    save_dataset(ds, path)
    return ds


def _sampler_config(config: RunConfig, args: argparse.Namespace) -> SamplerConfig:
    overrides = {
        "steps": args.steps,
        "cfg_scale": args.cfg_scale,
        "mode": args.mode,
        "t_end": args.t_end,
        "diffusion_scale": args.diffusion_scale,
    }
    sampler = replace(config.sampler, **{k: v for k, v in overrides.items() if v is not None})
    if args.no_cache:
        sampler = replace(sampler, use_cache=False)
    return sampler


def cmd_make_data(config: RunConfig, args: argparse.Namespace) -> int:
    path = config.resolve(args.output or config.data.path)
    ds = make_dataset(config.data)
    save_dataset(ds, path)
    print(f"wrote {ds} to {path}")
    return 0


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    model_config = config.model
    if args.preset:
        model_config = scaled_preset(args.preset, config.data.latent_shape, config.model.num_classes)
    train_config = config.train
    if args.steps is not None:
        train_config = replace(train_config, total_steps=args.steps)
    if args.seq_len is not None:
        train_config = replace(train_config, seq_len=args.seq_len)
    resolved = replace(config, model=model_config, train=train_config)
    write_text_atomic(config.out_path / "run_config.json", json.dumps(config_to_dict(resolved), indent=2) + "\n")
    result = run_training(
        model_config,
        train_config,
        _dataset(config),
        out_dir=config.out_path,
        resume=args.resume,
        progress=args.progress,
    )
    if result.records:
        print(f"step {result.records[-1].step}: loss {result.records[-1].loss:.6f}")
    return 0


def cmd_sample(config: RunConfig, args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model(ema=True)
    sampler = _sampler_config(config, args)
    latents = sample_model(model, args.class_id, args.count, sampler, config.seed, progress=args.progress)
    write_latents(config.out_path / "samples.arfds", latents[None])
    if args.count > 0:
        write_pgm(config.out_path / "samples.pgm", sample_grid(latents))
    print(f"wrote {args.count} samples of class {args.class_id} to {config.out_path}")
    return 0


def _evaluate_class(samples: np.ndarray, ds: CategoryDataset, class_id: int, seed: int) -> EvalReport:
    return evaluate(samples, ds.class_items(class_id), seed=seed)


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    latents = read_latents(args.samples)
    samples = latents.reshape((-1,) + latents.shape[2:])
    ds = load_dataset(args.reference) if args.reference else _dataset(config, build_missing=False)
    if samples.shape[1:] != ds.latent_shape:
        raise ShapeError(f"samples have latent shape {samples.shape[1:]}, the reference has {ds.latent_shape}")
    report = _evaluate_class(samples, ds, args.class_id, config.seed)
    write_eval_csv(config.out_path / "eval.csv", [report])
    print(f"mmd2 {report.mmd:.6g}, mean error {report.mean_error:.6g}, cov error {report.cov_error:.6g}")
    return 0


def cmd_bench(config: RunConfig, args: argparse.Namespace) -> int:
    points = []
    for mechanism in args.mechanism:
        series = sweep(
            mechanism,
            args.t_list,
            C=args.chunk,
            d=args.head_dim,
            heads=args.heads,
            repeats=args.repeats,
            seed=config.seed,
            progress=args.progress,
        )
        slope, r2 = fit_scaling_exponent(series) if len(series) > 1 else (float("nan"), float("nan"))
        print(f"{mechanism}: log-log slope {slope:.3f} (r2 {r2:.3f})")
        points.extend(series)
    write_bench_csv(config.out_path / "bench.csv", points)
    return 0


def cmd_inspect(config: RunConfig, args: argparse.Namespace) -> int:
    if args.presets:
        for name, preset in PRESETS.items():
            print(
                f"{name:>5}: depth {preset.depth:>2}, hidden {preset.hidden_size:>4}, heads {preset.num_heads:>2}, "
                f"latent {preset.latent_shape}, params {count_params(preset) / 1e6:.1f}M"
            )
    if args.checkpoint is None:
        if not args.presets:
            raise ConfigError("inspect needs --checkpoint or --presets")
        return 0
    ckpt = load_checkpoint(args.checkpoint)
    print(f"checkpoint: {args.checkpoint}")
    print(f"step: {ckpt.step}, float bits: {ckpt.float_bits}")
    print("model config: " + json.dumps(dataclasses.asdict(ckpt.model_config)))
    print("train config: " + json.dumps(dataclasses.asdict(ckpt.train_config)))
    print(f"parameters: {sum(a.size for a in ckpt.params.values())} (closed form {count_params(ckpt.model_config)})")
    for name, array in ckpt.params.items():
        print(f"  {name}: {tuple(array.shape)}")
    return 0


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> int:
    rows = []
    if args.kind == "seq-len":
        ds = _dataset(config)
        for value in args.values:
            n = int(value)
            result = run_training(
                config.model,
                replace(config.train, seq_len=n),
                ds,
                out_dir=config.out_path / f"seq_len_{n}",
                progress=args.progress,
            )
            metric = result.window_mean(args.window)
            LOGGER.info(f"ablation seq-len: N={n}, final-window loss {metric:.6f}")
            rows.append((value, metric))
        metric_name = "final_loss"
    else:
        if args.checkpoint is None:
            raise ConfigError(f"ablation '{args.kind}' needs --checkpoint")
        model = load_checkpoint(args.checkpoint).model(ema=True)
        ds = _dataset(config, build_missing=False)
        for value in args.values:
            if args.kind == "cfg":
                sampler = replace(config.sampler, cfg_scale=float(value))
            elif args.kind == "steps":
                sampler = replace(config.sampler, steps=int(value))
            else:
                sampler = replace(config.sampler, use_cache=str(value).lower() in ("1", "true", "yes", "on"))
            samples = sample_model(model, args.class_id, args.count, sampler, config.seed, progress=args.progress)
            metric = _evaluate_class(samples, ds, args.class_id, config.seed).mmd
            LOGGER.info(f"ablation {args.kind}: value {value}, mmd2 {metric:.6g}")
            rows.append((value, metric))
        metric_name = "mmd"
    lines = [f"kind,value,{metric_name}"] + [f"{args.kind},{value},{metric!r}" for value, metric in rows]
    write_text_atomic(config.out_path / f"ablation_{args.kind}.csv", "\n".join(lines) + "\n")
    for value, metric in rows:
        print(f"{args.kind}={value}: {metric_name} {metric:.6g}")
    return 0


def cmd_plot(config: RunConfig, args: argparse.Namespace) -> int:
    if not args.metrics and not args.bench:
        raise ConfigError("plot needs --metrics and/or --bench")
    if args.metrics:
        labels = args.labels or [Path(p).parent.name or str(p) for p in args.metrics]
        if len(labels) != len(args.metrics):
            raise ConfigError("--labels must name every --metrics file")
        runs = {label: read_metrics(path) for label, path in zip(labels, args.metrics)}
        plot_loss_curves(runs, config.out_path / "loss_curves.png", window=args.window)
    if args.bench:
        plot_scaling(read_bench_csv(args.bench), config.out_path / "scaling.png")
    return 0


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--class", dest="class_id", type=int, default=0)
    parser.add_argument("--count", type=int, default=64)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--cfg-scale", type=float)
    parser.add_argument("--mode", choices=SAMPLER_MODES)
    parser.add_argument("--t-end", type=float)
    parser.add_argument("--diffusion-scale", type=float)
    parser.add_argument("--no-cache", action="store_true", help="drop the inter-chunk state between steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arflow", description="Autoregressive flow models at desk scale.")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory (overrides out_dir)")
    parser.add_argument("--threads", type=int, help="training gradient shards")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    make_data = sub.add_parser("make-data", help="generate a toy category dataset")
    make_data.add_argument("--output", help="dataset path (defaults to data.path)")

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--resume", type=Path, help="checkpoint to continue from")
    train.add_argument("--steps", type=int, help="total training steps")
    train.add_argument("--seq-len", type=int)
    train.add_argument("--preset", choices=sorted(PRESETS), help="model width/depth preset")

    sample = sub.add_parser("sample", help="generate latents with the EMA weights")
    sample.add_argument("--checkpoint", type=Path, required=True)
    _add_sampler_flags(sample)

    evaluate_cmd = sub.add_parser("eval", help="score samples against a reference class")
    evaluate_cmd.add_argument("--samples", type=Path, required=True)
    evaluate_cmd.add_argument("--reference", type=Path, help="reference dataset (defaults to data.path)")
    evaluate_cmd.add_argument("--class", dest="class_id", type=int, default=0)

    bench = sub.add_parser("bench", help="attention scaling benchmark")
    bench.add_argument("--mechanism", nargs="+", default=["hybrid", "softmax_full", "linear_causal"])
    bench.add_argument("--t-list", type=int, nargs="+", default=list(DEFAULT_T_LIST))
    bench.add_argument("--chunk", type=int, default=64)
    bench.add_argument("--head-dim", type=int, default=64)
    bench.add_argument("--heads", type=int, default=1)
    bench.add_argument("--repeats", type=int, default=5)

    inspect = sub.add_parser("inspect", help="summarize a checkpoint")
    inspect.add_argument("--checkpoint", type=Path)
    inspect.add_argument("--presets", action="store_true", help="print preset parameter counts")

    ablate = sub.add_parser("ablate", help="run an ablation sweep")
    ablate.add_argument("--kind", choices=ABLATION_KINDS, required=True)
    ablate.add_argument("--values", nargs="+", required=True)
    ablate.add_argument("--checkpoint", type=Path)
    ablate.add_argument("--class", dest="class_id", type=int, default=0)
    ablate.add_argument("--count", type=int, default=256)
    ablate.add_argument("--window", type=int, default=50, help="final-window size for seq-len losses")

    plot = sub.add_parser("plot", help="plot loss curves or scaling")
    plot.add_argument("--metrics", type=Path, nargs="*")
    plot.add_argument("--labels", nargs="*")
    plot.add_argument("--bench", type=Path)
    plot.add_argument("--window", type=int, default=50)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = apply_overrides(load_run_config(args.config), seed=args.seed, out_dir=args.out, threads=args.threads)
        config.out_path.mkdir(parents=True, exist_ok=True)
        configure_logging(log_dir=config.out_path / "logs", level=args.log_level)
        LOGGER.info(f"arflow {args.command}: out_dir {config.out_dir}, seed {config.seed}")
        return COMMANDS[args.command](config, args)
    except ARFlowError as err:
        LOGGER.error(f"{type(err).__name__}: {err}")
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
