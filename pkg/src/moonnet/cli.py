"""Command-line entry point.

Subcommands: train, gradcheck, evaluate, augment-preview, stats, sweep.
Every flag has a config-file equivalent via ``--config`` (flat key=value).
Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .augment import AnnotationError, AugmentPackage, load_annotations, save_annotations
from .backbone import ConfigError
from .checkpoint import CheckpointError
from .config import ExperimentConfig, load_config_file
from .metrics import evaluate, mean_box_area
from .train import (
    SyntheticPatchTask,
    TrainingDiverged,
    evaluate_model,
    format_sweep_table,
    resolution_sweep,
    train,
)

_GATE_CHOICES = ["sigmoid", "residual-tanh"]
_AUG_CHOICES = ["ver1", "ver2", "ver3"]


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="key=value config file")
    p.add_argument("--design", type=int, dest="design_id")
    p.add_argument("--gate", choices=_GATE_CHOICES)
    p.add_argument("--width", type=float)
    p.add_argument("--size", type=int, dest="input_size")
    p.add_argument("--augment", choices=_AUG_CHOICES)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int, dest="steps_per_epoch")
    p.add_argument("--seed", type=int)


def _build_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if args.config is not None:
        cfg = load_config_file(args.config, cfg)
    from .config import _GATES, _PACKAGES  # parsing tables

    for key in ("design_id", "width", "input_size", "lr", "momentum", "batch",
                "epochs", "steps_per_epoch", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if getattr(args, "gate", None) is not None:
        cfg.gate = _GATES[args.gate]
    if getattr(args, "augment", None) is not None:
        cfg.augment = _PACKAGES[args.augment]
    return cfg.validate()


def _load_detection_dir(path: Path):
    """One annotation file per image, paired by sorted filename."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix == ".txt")
    if not files:
        raise AnnotationError(f"no .txt annotation files in {path}")
    class_ids: dict[str, int] = {}
    return files, [load_annotations(f, class_ids) for f in files]


def cmd_train(args) -> int:
    cfg = _build_config(args)
    result = train(cfg, out_dir=args.out,
                   target_accuracy=args.target_accuracy)
    print(f"trained {result.steps_run} steps; final loss "
          f"{result.losses[-1]:.4f}, trailing accuracy {result.final_accuracy:.4f}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_gradcheck(args) -> int:
    reports = gc.run_full_suite(args.seed if args.seed is not None else 0)
    print(gc.format_reports(reports))
    return 0 if all(r.passed for r in reports) else 2


def cmd_evaluate(args) -> int:
    gt_files, gts = _load_detection_dir(args.gt)
    pred_files, preds = _load_detection_dir(args.preds)
    gt_names = [f.name for f in gt_files]
    pred_by_name = {f.name: p for f, p in zip(pred_files, preds)}
    preds_aligned = [pred_by_name.get(n, []) for n in gt_names]
    result = evaluate(preds_aligned, gts)
    print(f"{'metric':>10s} {'value':>8s}")
    for key, val in result.as_dict().items():
        print(f"{key:>10s} {val:8.4f}")
    if args.out is not None:
        lines = [f"{k}={v:.6f}" for k, v in result.as_dict().items()]
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_augment_preview(args) -> int:
    pkg = {"ver1": AugmentPackage.VER1, "ver2": AugmentPackage.VER2,
           "ver3": AugmentPackage.VER3}[args.package]
    task = SyntheticPatchTask(args.size, AugmentPackage.VER1)
    li = task.sample(args.seed)
    from .augment import apply_package

    out = apply_package(pkg, li, args.seed)
    print(f"{args.package}: {len(li.boxes)} boxes in, {len(out.boxes)} out; "
          f"image {out.height}x{out.width}")
    for b in out.boxes:
        print(f"  ({b.x1:.1f}, {b.y1:.1f}, {b.x2:.1f}, {b.y2:.1f}) class {b.class_id}")
    if args.out is not None:
        np.save(args.out, out.image.values)
        save_annotations(str(args.out) + ".txt", out.boxes)
        print(f"wrote {args.out}.npy and {args.out}.txt")
    return 0


def cmd_stats(args) -> int:
    class_ids: dict[str, int] = {}
    boxes = []
    root = Path(args.annotations)
    files = sorted(root.glob("*.txt")) if root.is_dir() else [root]
    for f in files:
        boxes += load_annotations(f, class_ids)
    if not boxes:
        print("no boxes found", file=sys.stderr)
        return 1
    mean, side = mean_box_area(boxes)
    print(f"boxes: {len(boxes)}")
    print(f"mean area: {mean:.1f} px^2 ({side:.1f} x {side:.1f})")
    return 0


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    for s in sizes:
        if s % 32:
            raise ConfigError(f"sweep size {s} not divisible by 32")
    rows = resolution_sweep(cfg, sizes)
    print(format_sweep_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moonnet",
        description="attention-gated CNN backbones, verification harness, and "
                    "detection metrics")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a patch model on the synthetic task")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, help="output directory for checkpoints and logs")
    p.add_argument("--target-accuracy", type=float, default=None,
                   help="stop early once the trailing mean accuracy reaches this")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="run the finite-difference oracle suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("evaluate", help="detection metrics from annotation dirs")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth annotation dir")
    p.add_argument("--preds", type=Path, required=True, help="prediction annotation dir")
    p.add_argument("--out", type=Path, help="machine-readable metrics file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("augment-preview", help="apply an augmentation package to a sample")
    p.add_argument("--package", choices=_AUG_CHOICES, default="ver3")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="basename for .npy image and .txt boxes")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("stats", help="mean box area over an annotation dir")
    p.add_argument("annotations", type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="train/evaluate across input sizes")
    _add_config_flags(p)
    p.add_argument("--sizes", default="64,96", help="comma-separated input sizes")
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, AnnotationError, FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, CheckpointError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
