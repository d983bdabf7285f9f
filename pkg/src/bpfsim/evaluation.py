"""Detection metrics: per-class average precision at an IoU threshold,
grouped mAP aggregates, and box-pool recall.

Detections and ground truths are (scene_id, box[, score]) tuples so the
matcher never pairs boxes across scenes.  Matching is greedy in
confidence order (ties by insertion index): a detection is a true
positive iff its best-IoU ground truth clears the threshold and is still
unmatched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import BBox, iou
from .synth import ClassRegistry

DetEntry = tuple[int, BBox, float]  # (scene_id, box, confidence)
GtEntry = tuple[int, BBox]


@dataclass
class MatchResult:
    tp: np.ndarray  # per detection, confidence-descending order
    fp: np.ndarray
    n_gt: int
    order: np.ndarray  # indices into the original detection list


def match_detections(dets: list[DetEntry], gts: list[GtEntry], iou_thresh: float) -> MatchResult:
    order = np.argsort(-np.array([d[2] for d in dets]), kind="stable") if dets else np.zeros(0, int)
    gt_by_scene: dict[int, list[BBox]] = {}
    for sid, box in gts:
        gt_by_scene.setdefault(sid, []).append(box)
    matched = {sid: [False] * len(boxes) for sid, boxes in gt_by_scene.items()}
    tp = np.zeros(order.size)
    fp = np.zeros(order.size)
    for rank, di in enumerate(order):
        sid, box, _ = dets[di]
        best_iou, best_j = 0.0, -1
        for j, gbox in enumerate(gt_by_scene.get(sid, [])):
            v = iou(box, gbox)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh and not matched[sid][best_j]:
            matched[sid][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    return MatchResult(tp=tp, fp=fp, n_gt=len(gts), order=order)


def _ap_all_point(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]).sum())


def _ap_eleven_point(recall: np.ndarray, precision: np.ndarray) -> float:
    total = 0.0
    for t in np.linspace(0.0, 1.0, 11):
        mask = recall >= t
        total += precision[mask].max() if mask.any() else 0.0
    return total / 11.0


def average_precision(
    dets: list[DetEntry],
    gts: list[GtEntry],
    iou_thresh: float = 0.5,
    interp: str = "all",
) -> float | None:
    """AP for one class; None when there is no ground truth (undefined)."""
    if interp not in ("all", "eleven"):
        raise ValueError(f"unknown interpolation: {interp}")
    if not gts:
        return None
    if not dets:
        return 0.0
    m = match_detections(dets, gts, iou_thresh)
    tp_cum = np.cumsum(m.tp)
    fp_cum = np.cumsum(m.fp)
    recall = tp_cum / m.n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    if interp == "all":
        return _ap_all_point(recall, precision)
    return _ap_eleven_point(recall, precision)


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def map_report(
    dets_by_class: dict[int, list[DetEntry]],
    gts_by_class: dict[int, list[GtEntry]],
    registry: ClassRegistry,
    stage: int,
    iou_thresh: float = 0.5,
    interp: str = "all",
) -> dict:
    """Per-class AP plus old/new/all/avg aggregates for one stage.

    Old covers classes of stages before `stage`, new covers `stage`'s
    classes; avg is the unweighted mean of the old and new aggregates.
    Classes without ground truth get AP None and are noted and excluded.
    """
    per_class: dict[int, float | None] = {}
    notes: list[str] = []
    known = registry.classes_through(stage)
    for cid in known:
        ap = average_precision(
            dets_by_class.get(cid, []), gts_by_class.get(cid, []), iou_thresh, interp
        )
        per_class[cid] = ap
        if ap is None:
            notes.append(f"class {cid}: no ground truth, excluded from means")
    old_ids = registry.classes_before(stage)
    new_ids = registry.classes_at(stage)
    defined = lambda ids: [per_class[c] for c in ids if per_class[c] is not None]
    old_map = _mean(defined(old_ids))
    new_map = _mean(defined(new_ids))
    all_map = _mean(defined(known))
    avg = None
    if old_map is not None and new_map is not None:
        avg = (old_map + new_map) / 2.0
    elif new_map is not None:
        avg = new_map
    return {
        "per_class_ap": per_class,
        "old_map": old_map,
        "new_map": new_map,
        "all_map": all_map,
        "avg_map": avg,
        "notes": notes,
    }


def recall_at_iou(
    boxes: list[tuple[int, BBox]], gts: list[GtEntry], iou_thresh: float = 0.5
) -> float:
    """Fraction of ground truths covered by at least one same-scene box."""
    if not gts:
        raise ValueError("undefined recall: no ground truth")
    boxes_by_scene: dict[int, list[BBox]] = {}
    for sid, box in boxes:
        boxes_by_scene.setdefault(sid, []).append(box)
    hit = 0
    for sid, gbox in gts:
        for box in boxes_by_scene.get(sid, []):
            if iou(box, gbox) >= iou_thresh:
                hit += 1
                break
    return hit / len(gts)
