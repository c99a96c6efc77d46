"""Axis-aligned box arithmetic: IoU, overlap tests, weighted averaging, NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous image coordinates (pixels)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box coordinate {name}={v!r} is not finite")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(
                f"degenerate box: need x2 > x1 and y2 > y1, got "
                f"({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        # Continuous-coordinate area, no +1 pixel convention.
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class ScoredBox:
    """A box with a confidence score and a class index."""

    box: Box
    score: float
    class_id: int

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite and in [0, 1], got {self.score!r}")


def box_from_row(row: Sequence[float]) -> Box:
    """Build a Box from a 4-element (x1, y1, x2, y2) sequence."""
    x1, y1, x2, y2 = (float(v) for v in row)
    return Box(x1, y1, x2, y2)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 array."""
    return np.array([b.to_list() for b in boxes], dtype=np.float64).reshape(-1, 4)


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    inter = intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def intersects(a: Box, b: Box) -> bool:
    """True iff the intersection has strictly positive area (touching edges do not count)."""
    return intersection_area(a, b) > 0.0


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between (N, 4) and (M, 4) box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.where(inter > 0.0, inter / union, 0.0)
    return out


def weighted_average_box(boxes: Sequence[Box], weights: Sequence[float]) -> Box:
    """Coordinate-wise weighted mean of boxes.

    Weights must be nonnegative with a strictly positive sum; the result is a
    valid box because each coordinate is a convex combination of valid ones.
    """
    if len(boxes) == 0:
        raise ValueError("cannot average an empty list of boxes")
    if len(boxes) != len(weights):
        raise ValueError(f"{len(boxes)} boxes but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("weight sum must be > 0")
    coords = boxes_to_array(boxes)
    avg = (coords * (w / total)[:, None]).sum(axis=0)
    return Box(*avg.tolist())


def nms(dets: Sequence[ScoredBox], iou_threshold: float) -> list[ScoredBox]:
    """Greedy per-class non-maximum suppression.

    Boxes are visited in descending score order (ties broken by lower original
    index); a box is suppressed when its IoU with an already-kept box of the
    same class is strictly greater than the threshold. Output is sorted by
    descending score, ties again by original index.
    """
    if not (math.isfinite(iou_threshold) and 0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold!r}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept_by_class: dict[int, list[int]] = {}
    kept: list[int] = []
    for i in order:
        det = dets[i]
        same_class = kept_by_class.setdefault(det.class_id, [])
        if all(iou(det.box, dets[j].box) <= iou_threshold for j in same_class):
            same_class.append(i)
            kept.append(i)
    return [dets[i] for i in kept]
