"""Anchor-box priors from ground-truth box shapes via k-means under 1 - IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_ITER = 300
RESTARTS = 10


class DegenerateClusterError(ValueError):
    pass


@dataclass(frozen=True)
class Anchor:
    width: float
    height: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"anchor dims must be positive, got {self.width}x{self.height}")

    @property
    def aspect(self) -> float:
        return self.width / self.height


def shape_iou(shapes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of concentric (w, h) shapes; (n, 2) x (k, 2) -> (n, k)."""
    inter = np.minimum(shapes[:, None, 0], centroids[None, :, 0]) * np.minimum(shapes[:, None, 1], centroids[None, :, 1])
    area_s = shapes[:, 0] * shapes[:, 1]
    area_c = centroids[:, 0] * centroids[:, 1]
    return inter / (area_s[:, None] + area_c[None, :] - inter)


def lloyd(shapes: np.ndarray, init: np.ndarray, max_iter: int = MAX_ITER):
    """Run assignment/update rounds from `init`; mean IoU never decreases.

    Returns (centroids, assignment, history) where history holds the mean
    best-IoU after every assignment step.
    """
    centroids = np.array(init, dtype=np.float64)
    k = len(centroids)
    assign = None
    history = []
    for _ in range(max_iter):
        ious = shape_iou(shapes, centroids)
        new_assign = ious.argmax(axis=1)
        history.append(float(ious[np.arange(len(shapes)), new_assign].mean()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = shapes[assign == j]
            if len(members):
                # median is the robust choice but need not raise the members' IoU;
                # take the better of median and mean, or stay put
                cur = shape_iou(members, centroids[j : j + 1]).sum()
                for cand in (np.median(members, axis=0), members.mean(axis=0)):
                    score = shape_iou(members, cand[None]).sum()
                    if score > cur:
                        centroids[j], cur = cand, score
            else:
                # re-seed an empty cluster on the worst-fit box
                worst = ious[np.arange(len(shapes)), assign].argmin()
                centroids[j] = shapes[worst]
    return centroids, assign, history


def kmeans_anchors(boxes: Sequence[tuple[float, float]], k: int = 3, seed: int = 0, restarts: int = RESTARTS):
    """Cluster box shapes into `k` anchors; returns (anchors sorted by area, mean IoU)."""
    shapes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(shapes) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(shapes)}")
    if np.any(shapes <= 0):
        raise ValueError("box shapes must have positive width and height")
    distinct = np.unique(shapes, axis=0)
    if len(distinct) < k:
        raise DegenerateClusterError(f"k={k} exceeds the {len(distinct)} distinct box shapes")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        init = distinct[rng.choice(len(distinct), size=k, replace=False)]
        centroids, assign, history = lloyd(shapes, init)
        score = history[-1]
        if best is None or score > best[0]:
            best = (score, centroids)
    score, centroids = best
    order = np.lexsort((centroids[:, 0], centroids[:, 0] * centroids[:, 1]))
    anchors = [Anchor(float(w), float(h)) for w, h in centroids[order]]
    return anchors, float(score)


def format_anchors(anchors: Sequence[Anchor]) -> str:
    return "".join(f"{a.width!r} {a.height!r}\n" for a in anchors)


def parse_anchors(text: str) -> list[Anchor]:
    anchors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"anchor line {lineno}: expected 'width height', got {line!r}")
        anchors.append(Anchor(float(parts[0]), float(parts[1])))
    if not anchors:
        raise ValueError("no anchors found")
    return anchors
