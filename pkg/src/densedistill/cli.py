"""Command-line entry points.

Subcommands: train-teacher, train-student, distill, ablate, eval, plot.
Configuration comes from a flat ``key = value`` file plus flag overrides;
exit codes are 0 on success, 2 for configuration errors, 3 for numeric
aborts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .harness import (
    ConfigError,
    OptimConfig,
    RunConfig,
    ablation_run,
    evaluate,
    train_student,
    train_teacher,
)
from .head import HeadConfig
from .losses import DistillConfig, NumericAbort
from .scenes import SceneSpec

_INT_KEYS = {
    "image_size", "num_categories", "objects_min", "objects_max", "box_min", "box_max",
    "scene_seed", "train_scenes", "val_scenes", "num_levels", "channels", "kernel_size",
    "student_convs", "teacher_convs", "student_backbone", "teacher_backbone",
    "steps", "batch_size", "eval_every", "seed",
}
_FLOAT_KEYS = {
    "noise_std", "lr", "momentum", "grad_clip", "lambda_a", "lambda_d", "lambda_l",
    "tau_d", "tau_l", "eval_score_threshold", "eval_nms_iou",
}
_STR_KEYS = {"pool_mode", "distance_softmax_axis", "loc_softmax_domain", "level_assignment", "out"}
_LIST_KEYS = {"seeds", "apply_anchor_to", "apply_distance_to"}


def parse_config_file(path: str) -> dict:
    """Flat ``key = value`` file; '#' starts a comment, unknown keys reject."""
    values: dict = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _STR_KEYS:
                values[key] = value
            elif key in _LIST_KEYS:
                items = value.replace(",", " ").split()
                values[key] = [int(v) for v in items] if key == "seeds" else items
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def build_run_config(mode: str, values: dict, args: argparse.Namespace) -> RunConfig:
    """Merge config-file values and CLI overrides into a RunConfig."""
    merged = dict(values)
    for flag in ("seed", "out", "lambda_a", "lambda_d", "lambda_l", "tau_d", "tau_l"):
        cli_value = getattr(args, flag, None)
        if cli_value is not None:
            merged[flag] = cli_value
    if getattr(args, "seeds", None):
        merged["seeds"] = [int(v) for v in args.seeds.replace(",", " ").split()]

    size = merged.get("image_size", 64)
    try:
        scene = SceneSpec(
            image_size=(size, size),
            num_categories=merged.get("num_categories", 3),
            objects_per_image=(merged.get("objects_min", 1), merged.get("objects_max", 3)),
            box_size_range=(merged.get("box_min", 12), merged.get("box_max", 28)),
            background_noise_std=merged.get("noise_std", 0.05),
            seed=merged.get("scene_seed", 0),
        )
        common = dict(
            num_levels=merged.get("num_levels", 3),
            channels=merged.get("channels", 16),
            num_categories=scene.num_categories,
            kernel_size=merged.get("kernel_size", 3),
        )
        student = HeadConfig(
            num_convs=merged.get("student_convs", 2),
            backbone_channels=merged.get("student_backbone", 16),
            **common,
        )
        teacher = HeadConfig(
            num_convs=merged.get("teacher_convs", 4),
            backbone_channels=merged.get("teacher_backbone", 32),
            **common,
        )
        optim = OptimConfig(
            lr=merged.get("lr", 0.02),
            momentum=merged.get("momentum", 0.9),
            steps=merged.get("steps", 600),
            batch_size=merged.get("batch_size", 4),
            grad_clip=merged.get("grad_clip", 10.0),
        )
        distill = DistillConfig(
            lambda_a=merged.get("lambda_a", 10.0),
            lambda_d=merged.get("lambda_d", 1000.0),
            lambda_l=merged.get("lambda_l", 1.0),
            tau_d=merged.get("tau_d", 0.1),
            tau_l=merged.get("tau_l", 0.1),
            apply_anchor_to=tuple(merged.get("apply_anchor_to", ("cls", "box"))),
            apply_distance_to=tuple(merged.get("apply_distance_to", ("cls", "box"))),
            pool_mode=merged.get("pool_mode", "masked-mean"),
            distance_softmax_axis=merged.get("distance_softmax_axis", "anchors"),
            loc_softmax_domain=merged.get("loc_softmax_domain", "spatial"),
        )
        seeds = merged.get("seeds")
        if seeds is None:
            seeds = [merged.get("seed", 0)]
        return RunConfig(
            mode=mode,
            scene=scene,
            student=student,
            teacher=teacher,
            optim=optim,
            distill=distill,
            seeds=tuple(seeds),
            out_dir=merged.get("out", "runs/run"),
            train_scenes=merged.get("train_scenes", 400),
            val_scenes=merged.get("val_scenes", 100),
            eval_score_threshold=merged.get("eval_score_threshold", 0.3),
            eval_nms_iou=merged.get("eval_nms_iou", 0.5),
            eval_every=merged.get("eval_every", 0),
            level_assignment=merged.get("level_assignment", "all"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--teacher", default=None, help="teacher checkpoint path")
    parser.add_argument("--lambda-a", dest="lambda_a", type=float, default=None)
    parser.add_argument("--lambda-d", dest="lambda_d", type=float, default=None)
    parser.add_argument("--lambda-l", dest="lambda_l", type=float, default=None)
    parser.add_argument("--tau-d", dest="tau_d", type=float, default=None)
    parser.add_argument("--tau-l", dest="tau_l", type=float, default=None)


def _parse_split(text: str, config: RunConfig) -> range:
    if text == "val":
        return range(config.train_scenes, config.train_scenes + config.val_scenes)
    if text == "train":
        return range(0, config.train_scenes)
    try:
        lo, hi = (int(v) for v in text.split(":"))
        return range(lo, hi)
    except ValueError as exc:
        raise ConfigError(f"bad split {text!r}, expected val, train or lo:hi") from exc


def _cmd_plot(args: argparse.Namespace) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, curves = [], {"l_det": [], "l_anchor": [], "l_distance": [], "l_loc": [], "total": []}
    ap_record = None
    with open(args.metrics) as fh:
        for line in fh:
            row = json.loads(line)
            if "toy_ap" in row:
                ap_record = row
                continue
            steps.append(row["step"])
            for key in curves:
                curves[key].append(row.get(key, 0.0))

    out_dir = args.out or "."
    import os
    os.makedirs(out_dir, exist_ok=True)

    fig, ax = plt.subplots(figsize=(7, 4))
    for key, series in curves.items():
        if any(v != 0.0 for v in series):
            ax.plot(steps, series, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    loss_path = os.path.join(out_dir, "loss_curves.svg")
    fig.savefig(loss_path)
    plt.close(fig)
    print(f"wrote {loss_path}")

    if ap_record is not None:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        per_cat = ap_record.get("per_category_ap") or {}
        names = [f"cat {c}" for c in sorted(per_cat)] + ["mean"]
        heights = [per_cat[c] for c in sorted(per_cat)] + [ap_record["toy_ap"]]
        ax.bar(names, heights)
        ax.set_ylim(0, 1)
        ax.set_ylabel("toy AP")
        fig.tight_layout()
        ap_path = os.path.join(out_dir, "ap_bars.svg")
        fig.savefig(ap_path)
        plt.close(fig)
        print(f"wrote {ap_path}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="densedistill")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-teacher", "train-student", "distill", "ablate", "eval"):
        p = sub.add_parser(name)
        _add_common_flags(p)
        if name == "ablate":
            p.add_argument("--grid", choices=("components", "temperatures", "both"), default="both")
            p.add_argument("--seeds", default=None, help="comma-separated seed list")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--split", default="val")
    plot = sub.add_parser("plot")
    plot.add_argument("--metrics", required=True, help="metrics.jsonl path")
    plot.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "plot":
            _cmd_plot(args)
            return 0
        values = parse_config_file(args.config) if args.config else {}
        mode = {
            "train-teacher": "teacher",
            "train-student": "baseline",
            "distill": "distill",
            "ablate": "ablation",
            "eval": "distill",
        }[args.command]
        config = build_run_config(mode, values, args)
        if args.command == "train-teacher":
            path = train_teacher(config)
            print(f"teacher checkpoint: {path}")
        elif args.command in ("train-student", "distill"):
            path, ap = train_student(config, args.teacher)
            print(f"student checkpoint: {path}  toy AP {ap:.4f}")
        elif args.command == "ablate":
            report = ablation_run(config, args.teacher, args.grid)
            print(f"ablation report: {report}")
            with open(report) as fh:
                print(fh.read(), end="")
        elif args.command == "eval":
            record = evaluate(args.checkpoint, _parse_split(args.split, config), config)
            print(record.canonical())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
