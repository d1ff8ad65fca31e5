"""Geometry primitives, annotation types and non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

NUM_CLASSES = 10
DEFAULT_NMS_IOU = 0.45


class FormatError(ValueError):
    """Input bytes or text do not follow the expected file layout."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class ConfigError(ValueError):
    """A configuration cannot produce the requested output."""


class TrainingError(RuntimeError):
    """Training diverged or hit a non-finite value."""


def check_digit(value: int) -> int:
    if int(value) != value or not 0 <= value < NUM_CLASSES:
        raise ValueError(f"digit class must be an integer in [0, 9], got {value!r}")
    return int(value)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def x_center(self) -> float:
        return 0.5 * (self.x_min + self.x_max)

    @property
    def y_center(self) -> float:
        return 0.5 * (self.y_min + self.y_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> BoundingBox:
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    digit: int
    posterior: float

    def __post_init__(self):
        check_digit(self.digit)
        if not 0.0 <= self.posterior <= 1.0:
            raise ValueError(f"posterior must lie in [0, 1], got {self.posterior}")


@dataclass(frozen=True)
class DigitAnnotation:
    digit: int
    box: BoundingBox

    def __post_init__(self):
        check_digit(self.digit)


@dataclass(frozen=True, eq=False)
class StringSample:
    """A grayscale string image with its left-to-right digit annotations."""

    image: np.ndarray
    annotations: tuple[DigitAnnotation, ...]
    label: str = field(default="")

    def __post_init__(self):
        image = np.asarray(self.image)
        if image.ndim != 2 or image.shape[0] < 1 or image.shape[1] < 1:
            raise ValueError(f"image must be a non-empty 2-D raster, got shape {image.shape}")
        object.__setattr__(self, "annotations", tuple(self.annotations))
        if not self.label:
            object.__setattr__(self, "label", "".join(str(a.digit) for a in self.annotations))
        if len(self.label) != len(self.annotations):
            raise ValueError("label length must equal annotation count")
        if self.label != "".join(str(a.digit) for a in self.annotations):
            raise ValueError(f"label {self.label!r} disagrees with annotation classes")
        centers = [a.box.x_center for a in self.annotations]
        if any(b < a for a, b in zip(centers, centers[1:])):
            raise ValueError("annotations must be sorted by box x-center")
        h, w = image.shape
        for a in self.annotations:
            b = a.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValueError(f"annotation box {b.as_tuple()} outside image {w}x{h}")

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def boxes(self) -> list[BoundingBox]:
        return [a.box for a in self.annotations]

    def __eq__(self, other):
        if not isinstance(other, StringSample):
            return NotImplemented
        return (
            self.label == other.label
            and self.annotations == other.annotations
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) arrays of x_min, y_min, x_max, y_max."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def detection_order(dets: Sequence[Detection]) -> list[int]:
    """Indices sorted by posterior descending; ties by smaller x_min, then smaller class."""
    return sorted(
        range(len(dets)),
        key=lambda i: (-dets[i].posterior, dets[i].box.x_min, dets[i].digit, i),
    )


def nms(dets: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy class-wise suppression; returns survivors in the order they were kept."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    kept: list[Detection] = []
    by_class: dict[int, list[BoundingBox]] = {}
    for i in detection_order(dets):
        det = dets[i]
        same = by_class.setdefault(det.digit, [])
        if all(iou(det.box, k) < iou_threshold for k in same):
            kept.append(det)
            same.append(det.box)
    return kept
