"""Deterministic synthetic detection scenes with known boxes and labels.

Scenes are gray images sprinkled with colored rectangles and disks, one fixed
hue per category, so a tiny detector can genuinely learn to classify them.
All randomness is counter-based (Philox keyed by seed, scene index and object
slot), which makes every sample a pure function of its spec.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field

import numpy as np

from .masks import BoundingBox

__all__ = [
    "SceneSpec",
    "SceneSample",
    "generate_scene",
    "generate_dataset",
    "category_color",
    "write_scene_file",
    "read_scene_file",
]

_MAGIC = b"DDSCENE1"
_VERSION = 1
_MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for a family of synthetic scenes."""

    image_size: tuple[int, int] = (64, 64)
    num_categories: int = 3
    objects_per_image: tuple[int, int] = (1, 3)
    box_size_range: tuple[int, int] = (12, 28)
    background_noise_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 1 or w < 1:
            raise ValueError("image size must be positive")
        if self.num_categories < 1:
            raise ValueError("need at least one category")
        lo, hi = self.objects_per_image
        if not (0 <= lo <= hi):
            raise ValueError("objects_per_image must satisfy 0 <= min <= max")
        smin, smax = self.box_size_range
        if not (1 <= smin <= smax):
            raise ValueError("box_size_range must satisfy 1 <= min <= max")
        if smin > min(h, w):
            raise ValueError("smallest box does not fit inside the image")
        if self.background_noise_std < 0:
            raise ValueError("noise std must be non-negative")


@dataclass
class SceneSample:
    """One synthetic image with its ground truth."""

    image: np.ndarray  # [3, H, W] float64 in [0, 1]
    boxes: list[BoundingBox]
    labels: list[int]
    placement_warnings: int = 0

    def __post_init__(self):
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels must align")


def _rng(seed: int, index: int, slot: int) -> np.random.Generator:
    key = ((seed & 0xFFFFFFFFFFFFFFFF) << 64) | ((index & 0xFFFFFFFF) << 32) | (slot & 0xFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def category_color(category: int, num_categories: int) -> np.ndarray:
    """Fixed, evenly spaced hue per category id (1-based)."""
    hue = (category - 1) / num_categories
    return np.array(colorsys.hsv_to_rgb(hue, 1.0, 0.9), dtype=np.float64)


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    """Deterministically draw scene ``index``: gray background plus shapes.

    Later objects occlude earlier ones; every object keeps its tight box.
    Objects whose size draw cannot fit after 100 attempts are dropped and
    counted in ``placement_warnings``.
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    h, w = spec.image_size
    scene_rng = _rng(spec.seed, index, 0)
    count = int(scene_rng.integers(spec.objects_per_image[0], spec.objects_per_image[1] + 1))
    image = np.full((3, h, w), 0.5, dtype=np.float64)
    if spec.background_noise_std > 0:
        image += scene_rng.normal(0.0, spec.background_noise_std, size=(3, h, w))

    boxes: list[BoundingBox] = []
    labels: list[int] = []
    warnings = 0
    for obj in range(1, count + 1):
        obj_rng = _rng(spec.seed, index, obj)
        category = int(obj_rng.integers(1, spec.num_categories + 1))
        is_disk = bool(obj_rng.integers(0, 2))
        placed = False
        for _ in range(_MAX_PLACEMENT_ATTEMPTS):
            if is_disk:
                side_w = side_h = int(obj_rng.integers(spec.box_size_range[0], spec.box_size_range[1] + 1))
            else:
                side_w = int(obj_rng.integers(spec.box_size_range[0], spec.box_size_range[1] + 1))
                side_h = int(obj_rng.integers(spec.box_size_range[0], spec.box_size_range[1] + 1))
            if side_w > w or side_h > h:
                continue
            x1 = int(obj_rng.integers(0, w - side_w + 1))
            y1 = int(obj_rng.integers(0, h - side_h + 1))
            placed = True
            break
        if not placed:
            warnings += 1
            continue
        color = category_color(category, spec.num_categories)
        patch = np.broadcast_to(color[:, None, None], (3, side_h, side_w)).copy()
        if spec.background_noise_std > 0:
            patch += obj_rng.normal(0.0, spec.background_noise_std, size=(3, side_h, side_w))
        if is_disk:
            radius = side_w / 2.0
            ys = np.arange(side_h) + 0.5 - side_h / 2.0
            xs = np.arange(side_w) + 0.5 - side_w / 2.0
            inside = ys[:, None] ** 2 + xs[None, :] ** 2 <= radius ** 2
            region = image[:, y1:y1 + side_h, x1:x1 + side_w]
            image[:, y1:y1 + side_h, x1:x1 + side_w] = np.where(inside, patch, region)
        else:
            image[:, y1:y1 + side_h, x1:x1 + side_w] = patch
        boxes.append(BoundingBox(float(x1), float(y1), float(x1 + side_w), float(y1 + side_h), category))
        labels.append(category)

    np.clip(image, 0.0, 1.0, out=image)
    return SceneSample(image=image, boxes=boxes, labels=labels, placement_warnings=warnings)


def generate_dataset(spec: SceneSpec, n: int) -> list[SceneSample]:
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    return [generate_scene(spec, i) for i in range(n)]


def write_scene_file(path: str, samples: list[SceneSample]) -> None:
    """Binary dump: 16-byte header, then per-sample image/boxes/labels records.

    Images are stored as little-endian float32 planes, boxes as float32
    quadruples and labels as uint16, so files are bit-exact across platforms.
    """
    if not samples:
        raise ValueError("nothing to write")
    _, h, w = samples[0].image.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<8sHHHH", _MAGIC, _VERSION, h, w, len(samples)))
        for sample in samples:
            if sample.image.shape != (3, h, w):
                raise ValueError("all samples must share one image size")
            fh.write(sample.image.astype("<f4").tobytes())
            fh.write(struct.pack("<H", len(sample.boxes)))
            quad = np.array([[b.x1, b.y1, b.x2, b.y2] for b in sample.boxes], dtype="<f4")
            fh.write(quad.tobytes())
            fh.write(np.array(sample.labels, dtype="<u2").tobytes())


def read_scene_file(path: str) -> list[SceneSample]:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError("truncated scene file header")
        magic, version, h, w, count = struct.unpack("<8sHHHH", header)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported scene file version {version}")
        samples = []
        for _ in range(count):
            image = np.frombuffer(fh.read(3 * h * w * 4), dtype="<f4").reshape(3, h, w)
            (n_boxes,) = struct.unpack("<H", fh.read(2))
            quad = np.frombuffer(fh.read(n_boxes * 16), dtype="<f4").reshape(n_boxes, 4)
            labels = np.frombuffer(fh.read(n_boxes * 2), dtype="<u2")
            boxes = [
                BoundingBox(float(x1), float(y1), float(x2), float(y2), int(lab))
                for (x1, y1, x2, y2), lab in zip(quad, labels)
            ]
            samples.append(
                SceneSample(image=image.astype(np.float64), boxes=boxes, labels=[int(v) for v in labels])
            )
    return samples
