"""Category-anchor distillation losses.

Three terms tie a student head to a teacher head without new parameters:

* anchor loss: 1 - cosine between matched per-category pooled anchors,
  averaged over present slots and over all (conv depth, level) pairs;
* distance loss: per-pixel distributions over the anchors (cosine
  similarities through a temperature softmax), matched to the teacher's
  with KL divergence;
* localization loss: per-channel spatial softmax of box-branch feature
  maps, matched with KL divergence.

Teacher quantities are always gradient-detached.  Pixel-pixel similarity
matrices are never materialized: a similarity tensor has one row per anchor
slot, never per pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import ceil

import numpy as np

from .autograd import (
    Tensor,
    clamp_min,
    cosine_similarity,
    kl_divergence,
    masked_average_pool,
    softmax_temperature,
    stack,
)
from .head import HeadOutputs
from .masks import CategoryMaskSet

__all__ = [
    "AnchorSet",
    "DistillConfig",
    "DistillTerms",
    "NumericAbort",
    "compute_category_anchors",
    "anchor_loss",
    "pixel_anchor_similarity",
    "distance_loss",
    "loc_loss",
    "total_distill_loss",
    "pair_conv_depths",
    "distillation_losses",
]

log = logging.getLogger(__name__)

POOL_MODES = ("masked-mean", "full-area")
BRANCHES = ("cls", "box")


class NumericAbort(RuntimeError):
    """A loss component became NaN or infinite; training must stop."""


@dataclass(frozen=True)
class DistillConfig:
    """Loss coefficients, temperatures and application switches."""

    lambda_a: float = 10.0
    lambda_d: float = 1000.0
    lambda_l: float = 1.0
    tau_d: float = 0.1
    tau_l: float = 0.1
    apply_anchor_to: tuple[str, ...] = ("cls", "box")
    apply_distance_to: tuple[str, ...] = ("cls", "box")
    pool_mode: str = "masked-mean"
    # softmax over anchor slots per pixel, or over pixels per anchor slot
    distance_softmax_axis: str = "anchors"
    # spatial softmax per channel, or channel softmax per pixel
    loc_softmax_domain: str = "spatial"

    def __post_init__(self):
        if self.tau_d <= 0 or self.tau_l <= 0:
            raise ValueError("temperatures must be positive")
        if min(self.lambda_a, self.lambda_d, self.lambda_l) < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.pool_mode not in POOL_MODES:
            raise ValueError(f"pool_mode must be one of {POOL_MODES}")
        if self.distance_softmax_axis not in ("anchors", "pixels"):
            raise ValueError("distance_softmax_axis must be 'anchors' or 'pixels'")
        if self.loc_softmax_domain not in ("spatial", "channel"):
            raise ValueError("loc_softmax_domain must be 'spatial' or 'channel'")
        for branches in (self.apply_anchor_to, self.apply_distance_to):
            for b in branches:
                if b not in BRANCHES:
                    raise ValueError(f"unknown branch {b!r}")


@dataclass
class AnchorSet:
    """Per-category pooled anchor vectors for one (conv depth, level) map."""

    level: int
    conv_index: int
    anchors: dict[int, Tensor]
    present: dict[int, bool]

    def present_slots(self) -> list[int]:
        return [p for p in sorted(self.present) if self.present[p]]


def compute_category_anchors(
    feature: Tensor,
    masks: CategoryMaskSet,
    pool_mode: str = "masked-mean",
    conv_index: int = 0,
) -> AnchorSet:
    """Pool the feature map under each slot mask into one vector per slot.

    ``feature`` is [C, H, W] or batched [B, C, H, W]; batched maps pool over
    every image against the shared batch-level mask.  Absent slots carry no
    anchor.
    """
    if pool_mode not in POOL_MODES:
        raise ValueError(f"pool_mode must be one of {POOL_MODES}")
    if tuple(feature.shape[-2:]) != tuple(masks.grid):
        raise ValueError(f"feature grid {feature.shape[-2:]} does not match masks {masks.grid}")
    anchors: dict[int, Tensor] = {}
    present: dict[int, bool] = {}
    for slot in sorted(masks.masks):
        mask = masks.masks[slot]
        if not masks.present[slot]:
            present[slot] = False
            continue
        if pool_mode == "masked-mean":
            pooled, ok = masked_average_pool(feature, mask)
        else:
            cells = float(np.prod(masks.grid))
            if feature.ndim == 4:
                cells *= feature.shape[0]
                pooled = (feature * Tensor(mask)).sum(axis=(0, 2, 3)) * (1.0 / cells)
            else:
                pooled = (feature * Tensor(mask)).sum(axis=(1, 2)) * (1.0 / cells)
            ok = True
        present[slot] = ok
        if ok:
            anchors[slot] = pooled
    return AnchorSet(level=masks.level, conv_index=conv_index, anchors=anchors, present=present)


def anchor_loss(student: list[AnchorSet], teacher: list[AnchorSet]) -> Tensor:
    """Mean over (conv depth, level) pairs of the mean cosine mismatch
    1 - cos(student anchor, teacher anchor) over present slots."""
    if len(student) != len(teacher):
        raise ValueError("student and teacher anchor lists must align")
    total = Tensor(0.0)
    for s_set, t_set in zip(student, teacher):
        slots = s_set.present_slots()
        if slots != t_set.present_slots():
            raise ValueError("student and teacher anchor sets disagree on present slots")
        if not slots:
            continue
        pair_sum = Tensor(0.0)
        for slot in slots:
            s_anchor = s_set.anchors[slot]
            t_anchor = t_set.anchors[slot]
            if s_anchor.shape != t_anchor.shape:
                raise ValueError(
                    f"anchor width mismatch {s_anchor.shape} vs {t_anchor.shape}; "
                    "student and teacher heads must share channel width"
                )
            pair_sum = pair_sum + (1.0 - cosine_similarity(s_anchor, t_anchor.detach()))
        total = total + pair_sum * (1.0 / len(slots))
    return total * (1.0 / max(1, len(student)))


def _stack_unit_anchors(anchors: AnchorSet, eps: float) -> Tensor:
    rows = stack([anchors.anchors[p] for p in anchors.present_slots()], axis=0)
    norms = clamp_min((rows * rows).sum(axis=1, keepdims=True), eps * eps).sqrt()
    return rows / norms


def pixel_anchor_similarity(feature: Tensor, anchors: AnchorSet, eps: float = 1e-8) -> Tensor:
    """Cosine similarity between every pixel vector and every present anchor.

    Output is [P, H, W] for a [C, H, W] feature ([B, P, H, W] when batched):
    one row per anchor slot, never per pixel, so the pixel-pixel relation
    matrix is never formed.
    """
    slots = anchors.present_slots()
    if not slots:
        raise ValueError("no present anchors to compare against")
    unit_anchors = _stack_unit_anchors(anchors, eps)  # [P, C]
    if feature.ndim == 3:
        c, h, w = feature.shape
        pixels = feature.transpose((1, 2, 0)).reshape(h * w, c)
    elif feature.ndim == 4:
        b, c, h, w = feature.shape
        pixels = feature.transpose((0, 2, 3, 1)).reshape(b * h * w, c)
    else:
        raise ValueError("feature must be [C,H,W] or [B,C,H,W]")
    norms = clamp_min((pixels * pixels).sum(axis=1, keepdims=True), eps * eps).sqrt()
    sims = (pixels / norms) @ unit_anchors.transpose((1, 0))  # [N, P]
    if feature.ndim == 3:
        return sims.reshape(h, w, len(slots)).transpose((2, 0, 1))
    return sims.reshape(b, h, w, len(slots)).transpose((0, 3, 1, 2))


def _sim_slices(sims: Tensor, axis_mode: str) -> Tensor:
    """Reshape a [.., P, H, W] similarity tensor into 2-D distribution slices."""
    if sims.ndim == 3:
        p, h, w = sims.shape
        if axis_mode == "anchors":
            return sims.transpose((1, 2, 0)).reshape(h * w, p)
        return sims.reshape(p, h * w)
    b, p, h, w = sims.shape
    if axis_mode == "anchors":
        return sims.transpose((0, 2, 3, 1)).reshape(b * h * w, p)
    return sims.reshape(b * p, h * w)


def distance_loss(
    student_features: list[Tensor],
    student_anchors: list[AnchorSet],
    teacher_features: list[Tensor],
    teacher_anchors: list[AnchorSet],
    tau_d: float,
    softmax_axis: str = "anchors",
) -> Tensor:
    """KL between student and teacher pixel-to-anchor similarity
    distributions, averaged over pixels and over (conv depth, level) pairs."""
    n_pairs = len(student_features)
    if not (n_pairs == len(student_anchors) == len(teacher_features) == len(teacher_anchors)):
        raise ValueError("per-pair inputs must align")
    total = Tensor(0.0)
    for fs, a_s, ft, a_t in zip(student_features, student_anchors, teacher_features, teacher_anchors):
        slots = a_s.present_slots()
        if slots != a_t.present_slots():
            raise ValueError("student and teacher anchor sets disagree on present slots")
        if len(slots) == 0:
            log.warning("distance loss: no present anchors at depth %d level %d, skipping",
                        a_s.conv_index, a_s.level)
            continue
        if len(slots) == 1:
            # a single anchor makes the softmax constant and the KL exactly 0
            log.debug("distance loss: single anchor at depth %d level %d contributes 0",
                      a_s.conv_index, a_s.level)
            continue
        s2d = _sim_slices(pixel_anchor_similarity(fs, a_s), softmax_axis)
        t2d = _sim_slices(pixel_anchor_similarity(ft.detach(), a_t), softmax_axis).detach()
        s_dist = softmax_temperature(s2d, tau_d, axis=1)
        t_dist = softmax_temperature(t2d, tau_d, axis=1)
        total = total + kl_divergence(s_dist, t_dist, axis=1)
    return total * (1.0 / max(1, n_pairs))


def loc_loss(
    student_box_features: list[Tensor],
    teacher_box_features: list[Tensor],
    tau_l: float,
    domain: str = "spatial",
) -> Tensor:
    """KL between softmax-normalized box-branch feature maps of student and
    teacher, averaged over channels and (conv depth, level) pairs."""
    if len(student_box_features) != len(teacher_box_features):
        raise ValueError("per-pair inputs must align")
    total = Tensor(0.0)
    for fs, ft in zip(student_box_features, teacher_box_features):
        if fs.shape != ft.shape:
            raise ValueError(f"box feature shape mismatch {fs.shape} vs {ft.shape}")
        if fs.ndim == 3:
            c, h, w = fs.shape
            s2d, t2d = fs.reshape(c, h * w), ft.detach().reshape(c, h * w)
        else:
            b, c, h, w = fs.shape
            s2d, t2d = fs.reshape(b * c, h * w), ft.detach().reshape(b * c, h * w)
        if domain == "channel":
            s2d = s2d.transpose((1, 0))
            t2d = t2d.transpose((1, 0))
        s_dist = softmax_temperature(s2d, tau_l, axis=1)
        t_dist = softmax_temperature(t2d, tau_l, axis=1)
        total = total + kl_divergence(s_dist, t_dist, axis=1)
    return total * (1.0 / max(1, len(student_box_features)))


def total_distill_loss(
    det_loss: Tensor,
    anchor: Tensor,
    distance: Tensor,
    loc: Tensor,
    config: DistillConfig,
) -> Tensor:
    """Weighted sum of the detection loss and the three distillation terms."""
    for name, term in (("detection", det_loss), ("anchor", anchor), ("distance", distance), ("loc", loc)):
        if not np.all(np.isfinite(term.data)):
            raise NumericAbort(f"{name} loss is not finite")
    return det_loss + config.lambda_a * anchor + config.lambda_d * distance + config.lambda_l * loc


def pair_conv_depths(student_convs: int, teacher_convs: int) -> list[tuple[int, int]]:
    """Match student conv depths to proportionally-deep teacher convs
    (0-based); with 2 vs 4 convs this pairs (0, 1) and (1, 3)."""
    return [
        (d, ceil((d + 1) * teacher_convs / student_convs) - 1)
        for d in range(student_convs)
    ]


@dataclass
class DistillTerms:
    anchor: Tensor
    distance: Tensor
    loc: Tensor


def distillation_losses(
    student_out: HeadOutputs,
    teacher_out: HeadOutputs,
    masksets: list[CategoryMaskSet],
    config: DistillConfig,
) -> DistillTerms:
    """Assemble all three losses from recorded head features and batch masks.

    Skips any term whose coefficient is exactly 0 (the returned component is
    a constant 0), so a fully-disabled config reproduces plain training
    bit for bit.
    """
    s_depths = 1 + max(d for d, _ in student_out.cls_features)
    t_depths = 1 + max(d for d, _ in teacher_out.cls_features)
    depth_pairs = pair_conv_depths(s_depths, t_depths)
    levels = range(len(masksets))

    def branch_features(out: HeadOutputs, branch: str) -> dict:
        return out.cls_features if branch == "cls" else out.box_features

    def gather(branch: str) -> tuple[list, list, list, list]:
        sf, sa, tf, ta = [], [], [], []
        for s_depth, t_depth in depth_pairs:
            for lvl in levels:
                fs = branch_features(student_out, branch)[(s_depth, lvl)]
                ft = branch_features(teacher_out, branch)[(t_depth, lvl)]
                sf.append(fs)
                tf.append(ft)
                sa.append(compute_category_anchors(fs, masksets[lvl], config.pool_mode, s_depth))
                ta.append(compute_category_anchors(ft.detach(), masksets[lvl], config.pool_mode, t_depth))
        return sf, sa, tf, ta

    cache: dict[str, tuple] = {}

    def branch_data(branch: str) -> tuple:
        if branch not in cache:
            cache[branch] = gather(branch)
        return cache[branch]

    anchor = Tensor(0.0)
    if config.lambda_a != 0.0:
        for branch in config.apply_anchor_to:
            _, sa, _, ta = branch_data(branch)
            anchor = anchor + anchor_loss(sa, ta)

    distance = Tensor(0.0)
    if config.lambda_d != 0.0:
        for branch in config.apply_distance_to:
            sf, sa, tf, ta = branch_data(branch)
            distance = distance + distance_loss(sf, sa, tf, ta, config.tau_d, config.distance_softmax_axis)

    loc = Tensor(0.0)
    if config.lambda_l != 0.0:
        sf = [student_out.box_features[(sd, lvl)] for sd, _ in depth_pairs for lvl in levels]
        tf = [teacher_out.box_features[(td, lvl)] for _, td in depth_pairs for lvl in levels]
        loc = loc + loc_loss(sf, tf, config.tau_l, config.loc_softmax_domain)

    return DistillTerms(anchor=anchor, distance=distance, loc=loc)
