"""Command-line entry point.

Subcommands:
  generate   write a synthetic dataset (+ preview figure)
  train      fit a model, logging loss.csv, checkpoints and a loss figure
  eval       score a checkpoint, writing metrics.txt and sample panels
  gradcheck  run the finite-difference suite; exit 0 iff everything passes
  ablate     train + evaluate one of the ablation presets i..ix

Options shared by the training-style commands: --config (flat key=value
file), --seed, --out, --ablation, --device-threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .datagen import SceneSpec, generate_dataset, load_dataset
from .network import (ABLATION_PRESETS, DepthCompletionModel, NetworkConfig,
                      ablation_config)
from .optim import ScheduleConfig
from .train import TrainConfig, evaluate, train

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; '#' starts a comment, blank lines ignored."""
    values: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def _coerce(value: str, target):
    if isinstance(target, bool):
        lowered = value.lower()
        if lowered not in _BOOL:
            raise ValueError(f"expected boolean, got {value!r}")
        return _BOOL[lowered]
    if isinstance(target, int):
        return int(value)
    if isinstance(target, float):
        return float(value)
    if isinstance(target, tuple):
        parts = [float(p) for p in value.split(",")]
        return tuple(parts)
    return value


def apply_config(obj, values: dict[str, str], prefix: str = ""):
    """Overlay matching key=value entries onto a dataclass, returning a copy."""
    updates = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        if key in values:
            updates[f.name] = _coerce(values[key], getattr(obj, f.name))
    return dataclasses.replace(obj, **updates) if updates else obj


def _network_config(args, values: dict[str, str]) -> NetworkConfig:
    if args.ablation:
        cfg = ablation_config(args.ablation)
    else:
        cfg = NetworkConfig()
    return apply_config(cfg, values, prefix="net.")


def cmd_generate(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    spec = apply_config(SceneSpec(), values, prefix="scene.")
    sparse_mode = values.get("sparse_mode", "lines")
    density = float(values.get("density", 0.05))
    line_step = int(values.get("line_step", 8))
    out = Path(args.out)
    generate_dataset(spec, args.count, args.seed, out, sparse_mode=sparse_mode,
                     density=density, line_step=line_step)
    samples = load_dataset(out)
    if samples:
        from .report import save_dataset_preview
        save_dataset_preview(samples, out / "preview.png")
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    net_cfg = _network_config(args, values)
    schedule = apply_config(ScheduleConfig(), values, prefix="lr.")
    train_cfg = apply_config(
        TrainConfig(iters=args.iters, batch=args.batch, seed=args.seed,
                    checkpoint_every=args.checkpoint_every, schedule=schedule),
        values, prefix="train.")

    samples = load_dataset(args.data)
    model = DepthCompletionModel(net_cfg, seed=args.seed)
    out = Path(args.out)
    history = train(model, samples, train_cfg, out_dir=out,
                    log_every=args.log_every)
    from .report import save_loss_curves
    save_loss_curves(history, out / "loss_curves.png")
    print(f"trained {train_cfg.iters} steps; final total loss "
          f"{history[-1][2].total:.5f}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    net_cfg = _network_config(args, values)
    samples = load_dataset(args.data)
    model = DepthCompletionModel(net_cfg, seed=args.seed)
    model.load(args.ckpt)
    report = evaluate(model, samples, per_image=args.per_image,
                      threads=args.device_threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value!r}" for key, value in report.as_dict().items()]
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    from .report import save_eval_panels
    from .train import predict
    shown = samples[:4]
    save_eval_panels(shown, [predict(model, s) for s in shown],
                     out / "eval_panels.png")
    for line in lines:
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import run_gradient_suite
    results = run_gradient_suite(verbose=True)
    failed = [name for name, res in results.items() if not res.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_ablate(args) -> int:
    if args.preset not in ABLATION_PRESETS:
        print(f"unknown preset {args.preset!r}; choose from "
              f"{', '.join(ABLATION_PRESETS)}", file=sys.stderr)
        return 2
    args.ablation = args.preset
    rc = cmd_train(args)
    if rc:
        return rc
    if args.eval_data:
        args.ckpt = str(Path(args.out) / "final.edck")
        args.data = args.eval_data
        args.per_image = False
        return cmd_eval(args)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdepth",
        description="Event-guided depth completion: data generation, training, "
                    "evaluation and gradient verification on CPU.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--device-threads", type=int, default=1,
                       help="worker threads for generation/evaluation")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    common(p_gen, data=False)
    p_gen.add_argument("--count", type=int, default=8)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.add_argument("--iters", type=int, default=300)
    p_train.add_argument("--batch", type=int, default=2)
    p_train.add_argument("--ablation", choices=list(ABLATION_PRESETS), default=None)
    p_train.add_argument("--checkpoint-every", type=int, default=0)
    p_train.add_argument("--log-every", type=int, default=50)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--ablation", choices=list(ABLATION_PRESETS), default=None)
    p_eval.add_argument("--per-image", action="store_true",
                        help="average metrics per sample instead of pooling pixels")
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p_grad.set_defaults(func=cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="train and evaluate a preset")
    common(p_abl)
    p_abl.add_argument("--preset", required=True, choices=list(ABLATION_PRESETS))
    p_abl.add_argument("--iters", type=int, default=300)
    p_abl.add_argument("--batch", type=int, default=2)
    p_abl.add_argument("--checkpoint-every", type=int, default=0)
    p_abl.add_argument("--log-every", type=int, default=50)
    p_abl.add_argument("--eval-data", default=None,
                       help="held-out dataset to score after training")
    p_abl.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
