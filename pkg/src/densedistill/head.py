"""Toy anchor-free one-stage detector.

A small strided-conv backbone produces a feature pyramid; a head shared
across levels runs parallel classification and box branches whose
intermediate conv outputs form the distillation surface.  Cells predict a
per-category score and (l, t, r, b) distances in stride units from the cell
center, FCOS-style but without centerness.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .autograd import Tensor, conv2d, relu, sigmoid, softplus
from .masks import BoundingBox
from .scenes import SceneSample

__all__ = [
    "HeadConfig",
    "HeadOutputs",
    "Detection",
    "init_params",
    "forward",
    "detection_loss",
    "decode_predictions",
    "evaluate_toy_ap",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"DDHEADV1"
_CKPT_VERSION = 1

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass(frozen=True)
class HeadConfig:
    """Architecture knobs; student and teacher must share ``channels``."""

    num_levels: int = 3
    channels: int = 16
    num_convs: int = 2
    num_categories: int = 3
    kernel_size: int = 3
    backbone_channels: int = 16

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if min(self.num_levels, self.channels, self.num_convs, self.num_categories) < 1:
            raise ValueError("all head dimensions must be >= 1")

    @property
    def strides(self) -> list[int]:
        return [4 * (1 << k) for k in range(self.num_levels)]


@dataclass
class HeadOutputs:
    """Everything the head produces for one image or one batch.

    ``cls_features``/``box_features`` map (conv depth, level) to the recorded
    intermediate feature maps; logits and deltas are per-level lists.
    """

    cls_features: dict[tuple[int, int], Tensor]
    box_features: dict[tuple[int, int], Tensor]
    cls_logits: list[Tensor]
    box_deltas: list[Tensor]
    strides: list[int]
    batched: bool


class Detection(NamedTuple):
    box: tuple[float, float, float, float]
    category: int
    score: float


def _he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, std, size=(c_out, c_in, k, k))


def init_params(config: HeadConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-initialized parameter store; the class predictor bias starts at the
    background prior so early training is not swamped by negatives."""
    k = config.kernel_size
    bb, ch = config.backbone_channels, config.channels
    params: dict[str, np.ndarray] = {}
    params["backbone.stem.weight"] = _he_conv(rng, bb, 3, k)
    params["backbone.stem.bias"] = np.zeros(bb)
    for lvl in range(config.num_levels):
        params[f"backbone.down{lvl}.weight"] = _he_conv(rng, bb, bb, k)
        params[f"backbone.down{lvl}.bias"] = np.zeros(bb)
        params[f"backbone.proj{lvl}.weight"] = _he_conv(rng, ch, bb, k)
        params[f"backbone.proj{lvl}.bias"] = np.zeros(ch)
    for branch in ("cls", "box"):
        for depth in range(config.num_convs):
            params[f"head.{branch}{depth}.weight"] = _he_conv(rng, ch, ch, k)
            params[f"head.{branch}{depth}.bias"] = np.zeros(ch)
    params["head.cls_pred.weight"] = _he_conv(rng, config.num_categories, ch, k)
    params["head.cls_pred.bias"] = np.full(config.num_categories, -np.log(99.0))
    params["head.box_pred.weight"] = _he_conv(rng, 4, ch, k)
    params["head.box_pred.bias"] = np.ones(4)
    return {name: Tensor(value, requires_grad=True) for name, value in params.items()}


def forward(image: Tensor, config: HeadConfig, params: dict[str, Tensor]) -> HeadOutputs:
    """Run backbone-stub and both head branches, recording every intermediate
    branch output keyed by (conv depth, level)."""
    batched = image.ndim == 4
    h, w = image.shape[-2:]
    top_stride = config.strides[-1]
    if h % top_stride or w % top_stride:
        raise ValueError(f"image size {h}x{w} not divisible by stride {top_stride}")
    pad = config.kernel_size // 2

    def block(x: Tensor, name: str, stride: int) -> Tensor:
        return relu(conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=pad))

    x = block(image, "backbone.stem", 2)
    cls_features: dict[tuple[int, int], Tensor] = {}
    box_features: dict[tuple[int, int], Tensor] = {}
    cls_logits: list[Tensor] = []
    box_deltas: list[Tensor] = []
    for lvl in range(config.num_levels):
        x = block(x, f"backbone.down{lvl}", 2)
        feat = block(x, f"backbone.proj{lvl}", 1)
        branch_tips = {}
        for branch, store in (("cls", cls_features), ("box", box_features)):
            t = feat
            for depth in range(config.num_convs):
                t = block(t, f"head.{branch}{depth}", 1)
                store[(depth, lvl)] = t
            branch_tips[branch] = t
        cls_logits.append(
            conv2d(branch_tips["cls"], params["head.cls_pred.weight"], params["head.cls_pred.bias"], padding=pad)
        )
        box_deltas.append(
            softplus(conv2d(branch_tips["box"], params["head.box_pred.weight"], params["head.box_pred.bias"], padding=pad))
        )
    return HeadOutputs(
        cls_features=cls_features,
        box_features=box_features,
        cls_logits=cls_logits,
        box_deltas=box_deltas,
        strides=config.strides,
        batched=batched,
    )


def assign_level(box: BoundingBox, strides: list[int]) -> int:
    """Pick the pyramid level whose stride range holds the box's longer side:
    [0, 32) -> stride 4, [32, 64) -> stride 8, the rest upward."""
    side = max(box.width, box.height)
    for lvl, stride in enumerate(strides[:-1]):
        if side < 8 * stride:
            return lvl
    return len(strides) - 1


def _build_targets(samples: list[SceneSample], config: HeadConfig, grids: list[tuple[int, int]]):
    """Per-level (class one-hot, positive mask, ltrb-in-stride-units) arrays."""
    n = len(samples)
    strides = config.strides
    cls_t = [np.zeros((n, config.num_categories) + g) for g in grids]
    pos_t = [np.zeros((n, 1) + g) for g in grids]
    box_t = [np.zeros((n, 4) + g) for g in grids]
    for b, sample in enumerate(samples):
        per_level: dict[int, list[BoundingBox]] = {}
        for box in sample.boxes:
            per_level.setdefault(assign_level(box, strides), []).append(box)
        for lvl, boxes in per_level.items():
            stride = strides[lvl]
            h_k, w_k = grids[lvl]
            cy = (np.arange(h_k) + 0.5) * stride
            cx = (np.arange(w_k) + 0.5) * stride
            best_area = np.full((h_k, w_k), np.inf)
            for box in sorted(boxes, key=lambda bb: bb.area()):
                inside = (
                    (cx[None, :] > box.x1)
                    & (cx[None, :] < box.x2)
                    & (cy[:, None] > box.y1)
                    & (cy[:, None] < box.y2)
                )
                claim = inside & (box.area() < best_area)
                if not claim.any():
                    continue
                best_area[claim] = box.area()
                ys, xs = np.nonzero(claim)
                cls_t[lvl][b, :, ys, xs] = 0.0
                cls_t[lvl][b, box.category - 1, ys, xs] = 1.0
                pos_t[lvl][b, 0, ys, xs] = 1.0
                box_t[lvl][b, 0, ys, xs] = (cx[xs] - box.x1) / stride
                box_t[lvl][b, 1, ys, xs] = (cy[ys] - box.y1) / stride
                box_t[lvl][b, 2, ys, xs] = (box.x2 - cx[xs]) / stride
                box_t[lvl][b, 3, ys, xs] = (box.y2 - cy[ys]) / stride
    return cls_t, pos_t, box_t


def detection_loss(outputs: HeadOutputs, samples: list[SceneSample], config: HeadConfig) -> Tensor:
    """Focal classification over all cells plus L1 regression over positives,
    each normalized by max(1, #positives)."""
    grids = [tuple(t.shape[-2:]) for t in outputs.cls_logits]
    cls_t, pos_t, box_t = _build_targets(samples, config, grids)
    n_pos = float(sum(p.sum() for p in pos_t))
    norm = 1.0 / max(1.0, n_pos)

    total = Tensor(0.0)
    for lvl in range(len(grids)):
        logits = outputs.cls_logits[lvl]
        deltas = outputs.box_deltas[lvl]
        if not outputs.batched:
            logits = logits.reshape((1,) + logits.shape)
            deltas = deltas.reshape((1,) + deltas.shape)
        target = Tensor(cls_t[lvl])
        prob = sigmoid(logits)
        # stable log-sigmoid terms: log p = -softplus(-x), log (1-p) = -softplus(x)
        pos_term = target * (1.0 - prob) * (1.0 - prob) * softplus(-logits) * FOCAL_ALPHA
        neg_term = (1.0 - target) * prob * prob * softplus(logits) * (1.0 - FOCAL_ALPHA)
        total = total + (pos_term + neg_term).sum() * norm

        pos_mask = Tensor(pos_t[lvl])
        residual = (deltas - Tensor(box_t[lvl])) * pos_mask
        total = total + residual.abs().sum() * (norm / 4.0)
    return total


def _iou(a, b) -> float:
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix2 - ix1), max(0.0, iy2 - iy1)
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    kept: list[Detection] = []
    for det in sorted(dets, key=lambda d: -d.score):
        if all(_iou(det.box, k.box) <= iou_threshold for k in kept):
            kept.append(det)
    return kept


def decode_predictions(
    outputs: HeadOutputs, score_threshold: float, nms_iou: float
) -> list[Detection] | list[list[Detection]]:
    """Sigmoid-score cells above threshold decode to boxes around cell
    centers, then greedy per-category NMS.  Batched outputs return one list
    per image."""
    logits = [t.data if outputs.batched else t.data[None] for t in outputs.cls_logits]
    deltas = [t.data if outputs.batched else t.data[None] for t in outputs.box_deltas]
    n = logits[0].shape[0]
    results: list[list[Detection]] = []
    for b in range(n):
        candidates: list[Detection] = []
        for lvl, stride in enumerate(outputs.strides):
            with np.errstate(over="ignore"):
                scores = 1.0 / (1.0 + np.exp(-logits[lvl][b]))
            cats, ys, xs = np.nonzero(scores > score_threshold)
            for c, y, x in zip(cats, ys, xs):
                cx = (x + 0.5) * stride
                cy = (y + 0.5) * stride
                l, t, r, d = deltas[lvl][b, :, y, x] * stride
                candidates.append(
                    Detection((cx - l, cy - t, cx + r, cy + d), int(c) + 1, float(scores[c, y, x]))
                )
        per_cat: dict[int, list[Detection]] = {}
        for det in candidates:
            per_cat.setdefault(det.category, []).append(det)
        merged = [d for dets in per_cat.values() for d in _nms(dets, nms_iou)]
        merged.sort(key=lambda d: -d.score)
        results.append(merged)
    return results if outputs.batched else results[0]


def evaluate_toy_ap(
    predictions: list[list[Detection]],
    ground_truth: list[SceneSample],
    iou_threshold: float = 0.5,
) -> tuple[float, dict[int, float]]:
    """11-point interpolated AP at the given IoU, averaged over the
    categories present in the ground truth; also returns per-category AP."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must align per image")
    categories = sorted({lab for s in ground_truth for lab in s.labels})
    per_category: dict[int, float] = {}
    for cat in categories:
        gt_boxes = [
            [(b.x1, b.y1, b.x2, b.y2) for b in s.boxes if b.category == cat] for s in ground_truth
        ]
        n_gt = sum(len(g) for g in gt_boxes)
        dets = [
            (det.score, img, det.box)
            for img, img_dets in enumerate(predictions)
            for det in img_dets
            if det.category == cat
        ]
        dets.sort(key=lambda t: (-t[0], t[1]))
        matched = [set() for _ in gt_boxes]
        tps = np.zeros(len(dets))
        for i, (_, img, box) in enumerate(dets):
            best, best_j = 0.0, -1
            for j, gt in enumerate(gt_boxes[img]):
                if j in matched[img]:
                    continue
                iou = _iou(box, gt)
                if iou > best:
                    best, best_j = iou, j
            if best >= iou_threshold and best_j >= 0:
                matched[img].add(best_j)
                tps[i] = 1.0
        tp_cum = np.cumsum(tps)
        recall = tp_cum / max(1, n_gt)
        precision = tp_cum / np.arange(1, len(dets) + 1)
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r
            ap += float(precision[mask].max()) if mask.any() else 0.0
        per_category[cat] = ap / 11.0
    mean_ap = float(np.mean(list(per_category.values()))) if per_category else 0.0
    return mean_ap, per_category


def save_checkpoint(path: str, config: HeadConfig, params: dict[str, Tensor]) -> None:
    """Header (magic, version, config JSON) then named float64-LE tensors
    with shape prefixes."""
    blob = json.dumps(asdict(config), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sHI", _CKPT_MAGIC, _CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            raw = name.encode()
            tensor = params[name]
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[HeadConfig, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        head = fh.read(14)
        if len(head) != 14:
            raise ValueError("truncated checkpoint header")
        magic, version, blob_len = struct.unpack("<8sHI", head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config = HeadConfig(**json.loads(fh.read(blob_len).decode()))
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.astype(np.float64), requires_grad=True)
    return config, params
