"""Command-line entry point: train, deblur, evaluate, fit-prior, make-synth."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .losses import LossWeights
from .models import ModelVariant, load_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

# every key accepted in config files / --set overrides
KNOWN_KEYS = {
    "train.scheme", "train.variant", "train.epochs", "train.lr0",
    "train.d_g_ratio", "train.crop", "train.batch", "train.gamma1",
    "train.gamma2", "train.beta", "train.seed_init", "train.seed_data",
    "train.seed_alpha", "train.perceptual_backend", "train.checkpoint_every",
}

_INT_KEYS = {"train.epochs", "train.d_g_ratio", "train.crop", "train.batch",
             "train.seed_init", "train.seed_data", "train.seed_alpha",
             "train.checkpoint_every"}
_FLOAT_KEYS = {"train.lr0", "train.gamma1", "train.gamma2", "train.beta"}


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict:
    """Flat key=value config with # comments; unknown keys are fatal."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _check_key(key)
        values[key] = value
    return values


def _check_key(key: str) -> None:
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key {key!r}")


def _coerce(key: str, value: str):
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve_train_config(args) -> "TrainConfig":
    from .trainer import Scheme, TrainConfig

    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        _check_key(key.strip())
        values[key.strip()] = value.strip()
    # explicit CLI flags win over config file and --set
    flag_map = {
        "train.scheme": args.scheme, "train.variant": args.variant,
        "train.epochs": args.epochs, "train.lr0": args.lr0,
        "train.seed_init": args.seed_init, "train.seed_data": args.seed_data,
        "train.seed_alpha": args.seed_alpha, "train.crop": args.crop,
    }
    for key, flag in flag_map.items():
        if flag is not None:
            values[key] = str(flag)

    coerced = {k: _coerce(k, v) for k, v in values.items()}
    try:
        config = TrainConfig(
            variant=ModelVariant.parse(coerced.get("train.variant", "BS")),
            scheme=Scheme.parse(coerced.get("train.scheme", "SA1P")),
            weights=LossWeights(
                gamma1=coerced.get("train.gamma1", 100.0),
                gamma2=coerced.get("train.gamma2", 0.1),
                beta=coerced.get("train.beta", 10.0),
            ),
            lr0=coerced.get("train.lr0", 1e-4),
            d_g_ratio=coerced.get("train.d_g_ratio", 2),
            epochs=coerced.get("train.epochs", 300),
            crop=coerced.get("train.crop", 256),
            batch=coerced.get("train.batch", 1),
            seed_init=coerced.get("train.seed_init", 0),
            seed_data=coerced.get("train.seed_data", 0),
            seed_alpha=coerced.get("train.seed_alpha", 0),
            perceptual_backend=coerced.get("train.perceptual_backend",
                                           "seeded_random_cnn"),
            checkpoint_every=coerced.get("train.checkpoint_every", 10),
        )
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def make_run_dir(args, tag: str) -> Path:
    if getattr(args, "run_dir", None):
        run_dir = Path(args.run_dir)
    else:
        root = Path(os.environ.get("BISKIP_RUN_DIR", "runs"))
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = root / f"{stamp}-{tag}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def write_manifest(run_dir: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_train(args) -> int:
    from .data import load_paired_dataset
    from .reporting import render_training_curves
    from .trainer import TrainingDiverged, train

    try:
        config = resolve_train_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    data_dir = Path(args.data)
    if not data_dir.is_dir():
        print(f"data error: dataset directory {data_dir} does not exist",
              file=sys.stderr)
        return EXIT_DATA
    try:
        dataset = load_paired_dataset(data_dir)
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not dataset:
        print(f"data error: no pairs found under {data_dir}", file=sys.stderr)
        return EXIT_DATA

    run_dir = make_run_dir(args, config.run_tag())
    write_manifest(run_dir, "train", config.to_dict())
    print(f"run: {config.run_tag()}  ({len(dataset)} pairs)  -> {run_dir}")
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    try:
        report = train(config, dataset, run_dir=run_dir)
    except TrainingDiverged as exc:
        dump = run_dir / "divergence.json"
        dump.write_text(json.dumps(exc.diagnostics, indent=2, default=str))
        print(f"training diverged: {exc} (state dump: {dump})", file=sys.stderr)
        return EXIT_DIVERGED
    render_training_curves(report, run_dir / "training_curves.png")
    print(f"wrote {run_dir / 'report.jsonl'}")
    return EXIT_OK


def _load_model(checkpoint_path):
    try:
        generator, _, header, _ = load_checkpoint(checkpoint_path)
    except Exception as exc:
        raise ConfigError(f"cannot load checkpoint {checkpoint_path}: {exc}") from exc
    generator.eval()
    return generator, header


def cmd_deblur(args) -> int:
    from .data import load_image, save_image
    from .metrics import deblur_image

    try:
        generator, _ = _load_model(args.checkpoint)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    in_path = Path(args.input)
    out_path = Path(args.output)
    if in_path.is_dir():
        files = sorted(p for p in in_path.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        out_path.mkdir(parents=True, exist_ok=True)
        targets = [(f, out_path / f.name) for f in files]
    else:
        targets = [(in_path, out_path)]
    if not targets:
        print(f"data error: no images under {in_path}", file=sys.stderr)
        return EXIT_DATA

    for src, dst in targets:
        try:
            image = load_image(src)
        except (OSError, ValueError) as exc:
            print(f"data error: cannot read {src}: {exc}", file=sys.stderr)
            return EXIT_DATA
        restored, runtime = deblur_image(generator, image)
        dst.parent.mkdir(parents=True, exist_ok=True)
        save_image(dst, restored)
        print(f"{src} -> {dst}  ({runtime:.3f}s)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import from_model_range, load_paired_dataset
    from .metrics import evaluate
    from .reporting import render_eval_summary, save_saliency_maps

    try:
        generator, _ = _load_model(args.checkpoint)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dataset = load_paired_dataset(args.data)
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not dataset:
        print(f"data error: no pairs under {args.data}", file=sys.stderr)
        return EXIT_DATA

    run_dir = make_run_dir(args, "eval")
    write_manifest(run_dir, "evaluate", {
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "saliency": bool(args.saliency),
    })
    report, artifacts = evaluate(generator, dataset, compute_saliency=args.saliency)
    (run_dir / "metrics.csv").write_text(report.to_csv())
    (run_dir / "summary.json").write_text(report.to_json())
    render_eval_summary(report, run_dir / "metrics.png")
    if args.saliency:
        for pair in dataset:
            entry = artifacts[pair.id]
            images = {
                "blurred": from_model_range(pair.blurred),
                "sharp": from_model_range(pair.sharp),
                "output": entry["output"],
            }
            paths = save_saliency_maps(pair.id, entry["saliency"], images,
                                       run_dir / "saliency")
            report.saliency_paths.extend(str(p) for p in paths)
    print(report.to_json())
    print(f"wrote {run_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_fit_prior(args) -> int:
    from .data import load_image, save_image
    from .reporting import render_prior_trace
    from .trainer import TrainingDiverged, fit_deep_prior

    try:
        target = load_image(args.target)
    except (OSError, ValueError) as exc:
        print(f"data error: cannot read {args.target}: {exc}", file=sys.stderr)
        return EXIT_DATA
    source = None
    if args.input:
        try:
            source = load_image(args.input)
        except (OSError, ValueError) as exc:
            print(f"data error: cannot read {args.input}: {exc}", file=sys.stderr)
            return EXIT_DATA
    snapshots = tuple(int(s) for s in args.snap.split(",")) if args.snap else ()

    run_dir = make_run_dir(args, "fit-prior")
    write_manifest(run_dir, "fit-prior", {
        "target": str(args.target), "input": str(args.input or ""),
        "iters": args.iters, "seed": args.seed, "variant": args.variant,
        "snapshots": list(snapshots),
    })
    try:
        out, trace, snaps = fit_deep_prior(
            target, source, iters=args.iters, seed=args.seed,
            variant=ModelVariant.parse(args.variant), snapshots=snapshots)
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_image(run_dir / "final.png", out)
    for it, snap in snaps.items():
        save_image(run_dir / f"iter_{it:06d}.png", snap)
    (run_dir / "mse_trace.json").write_text(json.dumps(trace))
    render_prior_trace(trace, run_dir / "mse_trace.png", snaps)
    print(f"final MSE {trace[-1]:.6f} after {len(trace)} iters -> {run_dir}")
    return EXIT_OK


def cmd_make_synth(args) -> int:
    from .data import write_synth_dataset

    try:
        ids = write_synth_dataset(args.out, n=args.n, size=args.size,
                                  seed=args.seed, kernel_size=args.kernel_size,
                                  kernel_steps=args.kernel_steps)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {len(ids)} pairs under {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biskip",
                                     description="Bi-Skip motion deblurring toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run self-paced adversarial training")
    p.add_argument("--data", required=True, help="dataset root with blur/ and sharp/")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--scheme", help="loss scheme shorthand, e.g. SA1P")
    p.add_argument("--variant", help="S | BS-cR | BS-w/o-R | BS")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed-init", type=int, dest="seed_init")
    p.add_argument("--seed-data", type=int, dest="seed_data")
    p.add_argument("--seed-alpha", type=int, dest="seed_alpha")
    p.add_argument("--run-dir", dest="run_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("deblur", help="deblur an image or directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_deblur)

    p = sub.add_parser("evaluate", help="compute metrics over a paired dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--saliency", action="store_true",
                   help="also write saliency maps for blurred/sharp/output")
    p.add_argument("--run-dir", dest="run_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-prior", help="fit a generator to a single target")
    p.add_argument("--target", required=True)
    p.add_argument("--input", help="optional source image (default: seeded noise)")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--snap", help="comma-separated snapshot iterations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", default="BS")
    p.add_argument("--run-dir", dest="run_dir")
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("make-synth", help="emit a synthetic blur/sharp dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--kernel-size", type=int, default=9, dest="kernel_size")
    p.add_argument("--kernel-steps", type=int, default=8, dest="kernel_steps")
    p.set_defaults(func=cmd_make_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
