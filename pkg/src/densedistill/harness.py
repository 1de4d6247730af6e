"""Training harness: teacher/baseline/distill runs, ablation grids, metrics.

Every run is a pure function of (config, seed): parameter init, batch order
and synthetic data all come from counter-based generators, so metrics files
and checkpoints are bitwise reproducible.  Wall-clock timings are kept out
of the canonical metrics lines for exactly that reason.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autograd import Tensor
from .head import (
    HeadConfig,
    assign_level,
    decode_predictions,
    detection_loss,
    evaluate_toy_ap,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .losses import DistillConfig, NumericAbort, distillation_losses, total_distill_loss
from .masks import CategoryMaskSet, build_category_masks
from .scenes import SceneSpec, generate_scene

__all__ = [
    "ConfigError",
    "OptimConfig",
    "RunConfig",
    "MetricsRecord",
    "SGD",
    "train_teacher",
    "train_student",
    "evaluate",
    "ablation_run",
    "build_batch_masksets",
    "TEMPERATURE_GRID",
    "COMPONENT_GRID",
]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6
TEMPERATURE_GRID = (0.01, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
# component ablation rows: (name, use anchor, use distance, use loc)
COMPONENT_GRID = (
    ("baseline", False, False, False),
    ("anchor", True, False, False),
    ("distance", False, True, False),
    ("anchor+distance", True, True, False),
    ("all", True, True, True),
)


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    steps: int = 600
    batch_size: int = 4
    grad_clip: float = 10.0  # global grad-norm ceiling; 0 disables

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "distill"
    scene: SceneSpec = field(default_factory=SceneSpec)
    student: HeadConfig = field(default_factory=lambda: HeadConfig(num_convs=2))
    teacher: HeadConfig = field(default_factory=lambda: HeadConfig(num_convs=4, backbone_channels=32))
    optim: OptimConfig = field(default_factory=OptimConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/run"
    train_scenes: int = 400
    val_scenes: int = 100
    eval_score_threshold: float = 0.3
    eval_nms_iou: float = 0.5
    eval_every: int = 0  # 0 = evaluate only after the last step
    level_assignment: str = "all"  # rasterize instances at all levels, or "by-size"

    def __post_init__(self):
        if self.mode not in ("teacher", "baseline", "distill", "ablation"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise ConfigError("train and val splits must be non-empty")
        if self.student.channels != self.teacher.channels:
            raise ConfigError("student and teacher must share head channel width")
        if self.student.num_categories != self.scene.num_categories:
            raise ConfigError("head and scene category counts disagree")
        if self.level_assignment not in ("all", "by-size"):
            raise ConfigError("level_assignment must be 'all' or 'by-size'")


@dataclass
class MetricsRecord:
    step: int
    l_det: float | None = None
    l_anchor: float | None = None
    l_distance: float | None = None
    l_loc: float | None = None
    total: float | None = None
    wall_time: float = 0.0
    toy_ap: float | None = None
    per_category_ap: dict[int, float] | None = None

    def canonical(self) -> str:
        """Deterministic JSON line; wall-clock time deliberately excluded."""
        payload = {k: v for k, v in asdict(self).items() if k != "wall_time" and v is not None}
        return json.dumps(payload, sort_keys=True)


class SGD:
    """Plain SGD with momentum and an optional global grad-norm clip."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9, grad_clip: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        scale = 1.0
        if self.grad_clip > 0:
            sq = sum(
                float(np.sum(p.grad * p.grad)) for p in self.params.values() if p.grad is not None
            )
            norm = np.sqrt(sq)
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * scale
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _seeded_rng(seed: int, stream: int) -> np.random.Generator:
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | (stream & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def _grids(config: RunConfig, head: HeadConfig) -> list[tuple[int, int]]:
    h, w = config.scene.image_size
    return [(h // s, w // s) for s in head.strides]


def build_batch_masksets(samples, head_cfg: HeadConfig, grids, mode: str = "all") -> list[CategoryMaskSet]:
    """One batch-level CategoryMaskSet per pyramid level."""
    strides = head_cfg.strides
    masksets = []
    for lvl, stride in enumerate(strides):
        boxes = None
        if mode == "by-size":
            boxes = [
                b for s in samples for b in s.boxes if assign_level(b, strides) == lvl
            ]
        masksets.append(
            build_category_masks(
                samples, stride, grids[lvl], head_cfg.num_categories, level=lvl, boxes=boxes
            )
        )
    return masksets


def _write_run_meta(config: RunConfig, seed: int, out_dir: str) -> None:
    meta = {
        "mode": config.mode,
        "seed": seed,
        "scene": asdict(config.scene),
        "student": asdict(config.student),
        "teacher": asdict(config.teacher),
        "optimizer": asdict(config.optim),
        "distill": asdict(config.distill),
        "train_scenes": config.train_scenes,
        "val_scenes": config.val_scenes,
        "level_assignment": config.level_assignment,
    }
    with open(os.path.join(out_dir, "run_meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
        raise NumericAbort(f"{what} diverged (value {value})")


def _evaluate_params(
    config: RunConfig, head_cfg: HeadConfig, params: dict[str, Tensor], indices: range
) -> tuple[float, dict[int, float]]:
    if len(indices) == 0:
        raise ConfigError("evaluation split is empty")
    frozen = {k: v.detach() for k, v in params.items()}
    samples = [generate_scene(config.scene, i) for i in indices]
    predictions = []
    chunk = 8
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        images = Tensor(np.stack([s.image for s in part]))
        outputs = forward(images, head_cfg, frozen)
        predictions.extend(decode_predictions(outputs, config.eval_score_threshold, config.eval_nms_iou))
    return evaluate_toy_ap(predictions, samples)


def _train(
    config: RunConfig,
    head_cfg: HeadConfig,
    seed: int,
    out_dir: str,
    teacher: tuple[HeadConfig, dict[str, Tensor]] | None,
) -> tuple[str, float]:
    os.makedirs(out_dir, exist_ok=True)
    _write_run_meta(config, seed, out_dir)
    params = init_params(head_cfg, _seeded_rng(seed, 1))
    optimizer = SGD(params, config.optim.lr, config.optim.momentum, config.optim.grad_clip)
    order_rng = _seeded_rng(seed, 2)
    grids = _grids(config, head_cfg)
    distilling = teacher is not None and (
        config.distill.lambda_a != 0 or config.distill.lambda_d != 0 or config.distill.lambda_l != 0
    )
    records: list[MetricsRecord] = []
    started = time.perf_counter()
    cache: dict[int, object] = {}

    def scene(i: int):
        if i not in cache:
            cache[i] = generate_scene(config.scene, i)
        return cache[i]

    for step in range(1, config.optim.steps + 1):
        idx = order_rng.integers(0, config.train_scenes, size=config.optim.batch_size)
        batch = [scene(int(i)) for i in idx]
        images = Tensor(np.stack([s.image for s in batch]))
        outputs = forward(images, head_cfg, params)
        det = detection_loss(outputs, batch, head_cfg)
        record = MetricsRecord(step=step, l_det=float(det.data),
                               l_anchor=0.0, l_distance=0.0, l_loc=0.0)
        if distilling:
            t_cfg, t_params = teacher
            teacher_out = forward(images, t_cfg, t_params)
            masksets = build_batch_masksets(batch, head_cfg, grids, config.level_assignment)
            terms = distillation_losses(outputs, teacher_out, masksets, config.distill)
            total = total_distill_loss(det, terms.anchor, terms.distance, terms.loc, config.distill)
            record.l_anchor = float(terms.anchor.data)
            record.l_distance = float(terms.distance.data)
            record.l_loc = float(terms.loc.data)
        else:
            total = det
        record.total = float(total.data)
        _check_finite(record.total, "total loss")
        total.backward()
        optimizer.step()
        optimizer.zero_grad()
        record.wall_time = time.perf_counter() - started
        if config.eval_every and step % config.eval_every == 0 and step < config.optim.steps:
            ap, per_cat = _evaluate_params(config, head_cfg, params, _val_range(config))
            records.append(record)
            records.append(MetricsRecord(step=step, toy_ap=ap, per_category_ap=per_cat))
            continue
        records.append(record)

    ap, per_cat = _evaluate_params(config, head_cfg, params, _val_range(config))
    records.append(MetricsRecord(step=config.optim.steps, toy_ap=ap, per_category_ap=per_cat))

    ckpt_path = os.path.join(out_dir, "checkpoint.bin")
    save_checkpoint(ckpt_path, head_cfg, params)
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for record in records:
            fh.write(record.canonical())
            fh.write("\n")
    log.info("run %s finished in %.1fs, toy AP %.4f", out_dir, time.perf_counter() - started, ap)
    return ckpt_path, ap


def _val_range(config: RunConfig) -> range:
    return range(config.train_scenes, config.train_scenes + config.val_scenes)


def train_teacher(config: RunConfig) -> str:
    """Train the deep head on detection loss alone; returns checkpoint path."""
    if config.mode != "teacher":
        raise ConfigError("train_teacher requires mode=teacher")
    seed = config.seeds[0]
    path, ap = _train(config, config.teacher, seed, config.out_dir, teacher=None)
    log.info("teacher toy AP %.4f", ap)
    return path


def train_student(config: RunConfig, teacher_checkpoint: str | None = None) -> tuple[str, float]:
    """Train the student: plain detection loss (baseline) or the full
    distillation objective (distill, needs a teacher checkpoint)."""
    if config.mode not in ("baseline", "distill"):
        raise ConfigError("train_student requires mode=baseline or mode=distill")
    teacher = None
    if config.mode == "distill":
        if teacher_checkpoint is None:
            raise ConfigError("distill mode needs a teacher checkpoint")
        t_cfg, t_params = load_checkpoint(teacher_checkpoint)
        if t_cfg.channels != config.student.channels:
            raise ConfigError(
                f"teacher channels {t_cfg.channels} != student channels {config.student.channels}"
            )
        teacher = (t_cfg, {k: v.detach() for k, v in t_params.items()})
    seed = config.seeds[0]
    return _train(config, config.student, seed, config.out_dir, teacher)


def evaluate(checkpoint: str, split: range, config: RunConfig) -> MetricsRecord:
    """Toy AP of a checkpoint over a scene-index range; deterministic."""
    head_cfg, params = load_checkpoint(checkpoint)
    ap, per_cat = _evaluate_params(config, head_cfg, params, split)
    return MetricsRecord(step=0, toy_ap=ap, per_category_ap=per_cat)


def _component_config(config: RunConfig, use_anchor: bool, use_distance: bool, use_loc: bool) -> RunConfig:
    distill = replace(
        config.distill,
        lambda_a=config.distill.lambda_a if use_anchor else 0.0,
        lambda_d=config.distill.lambda_d if use_distance else 0.0,
        lambda_l=config.distill.lambda_l if use_loc else 0.0,
    )
    return replace(config, distill=distill)


def ablation_run(config: RunConfig, teacher_checkpoint: str | None = None, grid: str = "both") -> str:
    """Run the component grid and/or the temperature grids over the
    configured seeds; writes a plain-text table plus JSONL results."""
    if config.mode != "ablation":
        raise ConfigError("ablation_run requires mode=ablation")
    if grid not in ("components", "temperatures", "both"):
        raise ConfigError("grid must be components, temperatures or both")
    os.makedirs(config.out_dir, exist_ok=True)
    if teacher_checkpoint is None:
        teacher_cfg = replace(config, mode="teacher", out_dir=os.path.join(config.out_dir, "teacher"))
        teacher_checkpoint = train_teacher(teacher_cfg)

    results: list[dict] = []

    def run_cell(cell_name: str, cell_config: RunConfig, seed: int, mode: str) -> float:
        out_dir = os.path.join(config.out_dir, cell_name, f"seed{seed}")
        run_config = replace(cell_config, mode=mode, seeds=(seed,), out_dir=out_dir)
        _, ap = train_student(run_config, teacher_checkpoint if mode == "distill" else None)
        return ap

    if grid in ("components", "both"):
        for name, use_a, use_d, use_l in COMPONENT_GRID:
            cell = _component_config(config, use_a, use_d, use_l)
            mode = "baseline" if name == "baseline" else "distill"
            aps = [run_cell(f"component_{name}", cell, seed, mode) for seed in config.seeds]
            results.append(
                {"grid": "components", "cell": name, "seeds": list(config.seeds),
                 "toy_ap": aps, "mean_toy_ap": float(np.mean(aps))}
            )

    if grid in ("temperatures", "both"):
        for which in ("tau_d", "tau_l"):
            for tau in TEMPERATURE_GRID:
                cell = replace(config, distill=replace(config.distill, **{which: tau}))
                aps = [run_cell(f"{which}_{tau}", cell, seed, "distill") for seed in config.seeds]
                results.append(
                    {"grid": which, "cell": f"{which}={tau}", "seeds": list(config.seeds),
                     "toy_ap": aps, "mean_toy_ap": float(np.mean(aps))}
                )

    report_path = os.path.join(config.out_dir, "ablation_report.txt")
    with open(report_path, "w") as fh:
        fh.write(f"{'grid':<14}{'cell':<22}{'mean toy AP':>12}  per-seed\n")
        for row in results:
            per_seed = " ".join(f"{v:.4f}" for v in row["toy_ap"])
            fh.write(f"{row['grid']:<14}{row['cell']:<22}{row['mean_toy_ap']:>12.4f}  {per_seed}\n")
    with open(os.path.join(config.out_dir, "ablation_results.jsonl"), "w") as fh:
        for row in results:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")
    return report_path
