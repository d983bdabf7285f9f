"""Geometric kernels: IoU, greedy NMS, and center-inclusion region pooling.

Boxes are axis-aligned rectangles with continuous, half-open coordinates:
a box covers [x_min, x_max) x [y_min, y_max) and its area is
(x_max - x_min) * (y_max - y_min).  Grid cell (row i, col j) has its
center at (j + 0.5, i + 0.5); a cell belongs to a region iff its center
lies inside the half-open extent.  All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def clip(self, width: float, height: float) -> "BBox":
        """Clamp the box to the [0, width) x [0, height) extent."""
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    score: float
    class_id: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0,1]: {self.score}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) arrays of [x0,y0,x1,y1] boxes."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy NMS on array inputs; returns kept indices in keep order.

    Highest score first; ties broken by lower index.  A candidate is
    suppressed iff its IoU with an already-kept box exceeds iou_thresh.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh outside (0,1]: {iou_thresh}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0:
        return []
    # stable sort on -score keeps ties in original index order
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    ious = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for i in order:
        if all(ious[i, k] <= iou_thresh for k in kept):
            kept.append(int(i))
    return kept


def nms(dets: list[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    """Class-agnostic greedy NMS over scored boxes."""
    if not dets:
        if not 0.0 < iou_thresh <= 1.0:
            raise ValueError(f"iou_thresh outside (0,1]: {iou_thresh}")
        return []
    boxes = np.stack([d.box.as_array() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thresh)]


def cell_span(lo: float, hi: float, n_cells: int) -> tuple[int, int]:
    """Index range [i0, i1) of cells whose centers fall in [lo, hi)."""
    i0 = max(0, math.ceil(lo - 0.5))
    i1 = min(n_cells, math.ceil(hi - 0.5))
    return i0, max(i0, i1)


def box_cell_spans(boxes: np.ndarray, h: int, w: int) -> tuple[np.ndarray, ...]:
    """Vectorized cell_span for (N,4) boxes: returns (i0, i1, j0, j1) arrays."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    j0 = np.clip(np.ceil(boxes[:, 0] - 0.5), 0, w).astype(np.intp)
    j1 = np.clip(np.ceil(boxes[:, 2] - 0.5), 0, w).astype(np.intp)
    i0 = np.clip(np.ceil(boxes[:, 1] - 0.5), 0, h).astype(np.intp)
    i1 = np.clip(np.ceil(boxes[:, 3] - 0.5), 0, h).astype(np.intp)
    return i0, np.maximum(i0, i1), j0, np.maximum(j0, j1)


def integral_table(grid: np.ndarray) -> np.ndarray:
    """Zero-padded 2-D prefix-sum table over the leading (H, W) axes."""
    h, w = grid.shape[0], grid.shape[1]
    table = np.zeros((h + 1, w + 1) + grid.shape[2:], dtype=float)
    table[1:, 1:] = grid.astype(float).cumsum(axis=0).cumsum(axis=1)
    return table


def region_means(grid: np.ndarray, boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-box mean of grid cells (centers inside the box), via prefix sums.

    Works for (H, W) and (H, W, C) grids; returns (means, counts) where
    means is (N,) or (N, C).  Boxes covering zero cell centers get mean 0
    and count 0; callers decide whether that is an error.
    """
    h, w = grid.shape[0], grid.shape[1]
    i0, i1, j0, j1 = box_cell_spans(boxes, h, w)
    table = integral_table(grid)
    sums = table[i1, j1] - table[i0, j1] - table[i1, j0] + table[i0, j0]
    counts = (i1 - i0) * (j1 - j0)
    denom = np.maximum(counts, 1).astype(float)
    if grid.ndim == 3:
        means = sums / denom[:, None]
    else:
        means = sums / denom
    return means, counts


def region_avg(grid: np.ndarray, r: BBox) -> float:
    """Mean of the 2-D grid cells whose centers fall inside r."""
    if grid.ndim != 2:
        raise ValueError("region_avg expects a 2-D grid")
    means, counts = region_means(grid, r.as_array()[None, :])
    if counts[0] == 0:
        raise ValueError("empty region")
    return float(means[0])
