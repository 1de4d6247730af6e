"""Rasterize ground-truth instances into per-level category masks.

Each pyramid level gets one mask per slot: slot 2j-1 holds the central part
of every category-j instance, slot 2j the marginal (outer-ring) part, and the
last slot the background, defined as the cellwise complement of the union of
all the others.  Masks are batch-level: instances from every image in the
batch are OR-ed onto the same grid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from math import ceil, floor
from typing import Iterable, NamedTuple, Optional

import numpy as np

__all__ = [
    "BoundingBox",
    "CellRect",
    "CategoryMaskSet",
    "project_box_to_grid",
    "split_central_marginal",
    "build_category_masks",
    "write_mask_pgms",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image-pixel coordinates with a category id."""

    x1: float
    y1: float
    x2: float
    y2: float
    category: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def area(self) -> float:
        return self.width * self.height


class CellRect(NamedTuple):
    """Half-open rectangle of grid cells: [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def num_cells(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass
class CategoryMaskSet:
    """Binary masks for one pyramid level, indexed by anchor slot.

    Slots run 1..2n+1 for n categories; ``present[p]`` is true iff slot p
    covers at least one cell.
    """

    level: int
    stride: int
    num_categories: int
    masks: dict[int, np.ndarray]
    present: dict[int, bool]

    @property
    def background_slot(self) -> int:
        return 2 * self.num_categories + 1

    @property
    def grid(self) -> tuple[int, int]:
        return self.masks[self.background_slot].shape

    def present_slots(self) -> list[int]:
        return [p for p in sorted(self.masks) if self.present[p]]


def central_slot(category: int) -> int:
    return 2 * category - 1


def marginal_slot(category: int) -> int:
    return 2 * category


def project_box_to_grid(box: BoundingBox, stride: int, grid: tuple[int, int]) -> Optional[CellRect]:
    """Map a pixel box onto a feature grid, clamped; None if fully outside.

    The covered cells are [floor(x1/s), ceil(x2/s)) x [floor(y1/s), ceil(y2/s)),
    so any box intersecting the image maps to at least one cell.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h_k, w_k = grid
    x0 = max(0, floor(box.x1 / stride))
    x1 = min(w_k, ceil(box.x2 / stride))
    y0 = max(0, floor(box.y1 / stride))
    y1 = min(h_k, ceil(box.y2 / stride))
    if x0 >= x1 or y0 >= y1:
        return None
    return CellRect(x0, y0, x1, y1)


def split_central_marginal(cells: CellRect) -> tuple[set, set]:
    """Split a cell rectangle into interior (central) and 1-cell ring (marginal).

    Rectangles too thin to have an interior (width or height <= 2) come back
    entirely marginal.
    """
    if cells.num_cells == 0:
        raise ValueError("empty cell rectangle")
    every = {(y, x) for y in range(cells.y0, cells.y1) for x in range(cells.x0, cells.x1)}
    if cells.x1 - cells.x0 <= 2 or cells.y1 - cells.y0 <= 2:
        return set(), every
    central = {
        (y, x)
        for y in range(cells.y0 + 1, cells.y1 - 1)
        for x in range(cells.x0 + 1, cells.x1 - 1)
    }
    return central, every - central


def build_category_masks(
    samples: Iterable,
    stride: int,
    grid: tuple[int, int],
    num_categories: int,
    level: int = 0,
    boxes: Optional[list[BoundingBox]] = None,
) -> CategoryMaskSet:
    """OR the rasterized instances of a batch into per-slot binary masks.

    ``samples`` is an iterable of objects carrying a ``boxes`` list; pass
    ``boxes`` directly to override (used by the per-level assignment switch).
    The background mask is the complement of the union of all other slots.
    """
    if boxes is None:
        boxes = [b for sample in samples for b in sample.boxes]
    n_slots = 2 * num_categories + 1
    masks = {p: np.zeros(grid, dtype=np.float64) for p in range(1, n_slots + 1)}
    for box in boxes:
        if not 1 <= box.category <= num_categories:
            raise ValueError(f"category {box.category} outside [1, {num_categories}]")
        rect = project_box_to_grid(box, stride, grid)
        if rect is None:
            continue
        central, marginal = split_central_marginal(rect)
        for y, x in central:
            masks[central_slot(box.category)][y, x] = 1.0
        for y, x in marginal:
            masks[marginal_slot(box.category)][y, x] = 1.0
    union = np.zeros(grid, dtype=bool)
    for p in range(1, n_slots):
        union |= masks[p] > 0.0
    masks[n_slots] = (~union).astype(np.float64)
    present = {p: bool(masks[p].sum() > 0.0) for p in masks}
    return CategoryMaskSet(
        level=level,
        stride=stride,
        num_categories=num_categories,
        masks=masks,
        present=present,
    )


def write_mask_pgms(maskset: CategoryMaskSet, directory: str, prefix: str = "mask") -> list[str]:
    """Dump each slot as a PGM image for visual inspection; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for slot in sorted(maskset.masks):
        mask = maskset.masks[slot]
        h, w = mask.shape
        name = f"{prefix}_level{maskset.level}_slot{slot:02d}.pgm"
        path = os.path.join(directory, name)
        rows = "\n".join(" ".join("255" if v else "0" for v in row) for row in mask.astype(int))
        with open(path, "w") as fh:
            fh.write(f"P2\n{w} {h}\n255\n{rows}\n")
        paths.append(path)
    return paths
