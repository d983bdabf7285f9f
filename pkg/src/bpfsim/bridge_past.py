"""Pseudo labels for old classes from the previous-stage model.

Pipeline per scene: run the old model over all candidate regions, keep
detections whose best old-class probability clears the confidence
threshold, dedupe with class-agnostic NMS, drop anything overlapping a
current ground-truth box beyond the IoU gate, and weight the survivors
by how far they sit from the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Detection, DetectorModel, ScenePack, run_heads
from .geom import BBox, iou_matrix, nms_indices
from .synth import Scene

GROUND_TRUTH = "ground_truth"
PSEUDO = "pseudo"


@dataclass(frozen=True)
class BPConfig:
    eta: float = 0.75
    lambda1: float = 0.7
    nms_iou: float = 0.5
    weight_split_iou: float = 0.3
    high_weight: float = 1.0
    low_weight: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta outside (0,1): {self.eta}")
        if not 0.0 < self.lambda1 < 1.0:
            raise ValueError(f"lambda1 outside (0,1): {self.lambda1}")
        if not self.high_weight >= self.low_weight > 0.0:
            raise ValueError("weights must satisfy high_weight >= low_weight > 0")


@dataclass(frozen=True)
class WeightedAnnotation:
    box: BBox
    class_id: int
    loss_weight: float
    origin: str  # GROUND_TRUTH or PSEUDO

    def __post_init__(self):
        if not 0.0 < self.loss_weight <= 1.0:
            raise ValueError(f"loss_weight outside (0,1]: {self.loss_weight}")
        if self.origin == GROUND_TRUTH and self.loss_weight != 1.0:
            raise ValueError("ground-truth entries must have weight 1")


def gt_annotations(pairs) -> list[WeightedAnnotation]:
    return [WeightedAnnotation(b, c, 1.0, GROUND_TRUTH) for b, c in pairs]


def predict_old(m_old: DetectorModel, scene: Scene, pack: ScenePack | None = None) -> list[Detection]:
    """All candidate detections of the old model, no thresholding."""
    return run_heads(m_old, scene, pack)


def _select_core(
    boxes: np.ndarray,
    old_max_prob: np.ndarray,
    gt_boxes: np.ndarray,
    cfg: BPConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Shared gate arithmetic; returns (kept indices, loss weights)."""
    conf = np.nonzero(old_max_prob > cfg.eta)[0]
    if conf.size == 0:
        return conf, np.zeros(0)
    keep = nms_indices(boxes[conf], old_max_prob[conf], cfg.nms_iou)
    idx = conf[keep]
    if gt_boxes.shape[0]:
        max_gt_iou = iou_matrix(boxes[idx], gt_boxes).max(axis=1)
    else:
        max_gt_iou = np.zeros(idx.size)
    ok = max_gt_iou <= cfg.lambda1
    idx, max_gt_iou = idx[ok], max_gt_iou[ok]
    weights = np.where(max_gt_iou < cfg.weight_split_iou, cfg.high_weight, cfg.low_weight)
    return idx, weights


def select_pseudo_labels(
    dets: list[Detection], gt: list[WeightedAnnotation], cfg: BPConfig
) -> list[WeightedAnnotation]:
    """Confidence gate -> class-agnostic NMS -> ground-truth overlap gate ->
    overlap-based weight assignment.

    Every class known to the detections' model is treated as an old class;
    the pseudo class is the argmax over them.
    """
    for g in gt:
        if g.origin != GROUND_TRUTH:
            raise ValueError("gt entries must have origin ground_truth")
    if not dets:
        return []
    probs = np.stack([d.probs.probs for d in dets])
    boxes = np.stack([d.box.as_array() for d in dets])
    old_max = probs[:, :-1].max(axis=1)
    old_arg = probs[:, :-1].argmax(axis=1)
    gt_boxes = (
        np.stack([g.box.as_array() for g in gt]) if gt else np.zeros((0, 4))
    )
    idx, weights = _select_core(boxes, old_max, gt_boxes, cfg)
    classes = dets[0].probs.classes
    return [
        WeightedAnnotation(dets[i].box, classes[old_arg[i]], float(w), PSEUDO)
        for i, w in zip(idx, weights)
    ]


def collect_pseudo_labels(
    m_old: DetectorModel,
    scene: Scene,
    gt: list[WeightedAnnotation],
    cfg: BPConfig,
    pack: ScenePack | None = None,
) -> list[WeightedAnnotation]:
    """Fused fast path: equivalent to select_pseudo_labels(predict_old(...))
    but thresholds before materializing Detection objects."""
    from .detector import apply_delta_batch, classify_batch, pack_scene

    if pack is None:
        pack = pack_scene(scene, m_old.window_sizes, m_old.window_stride)
    h, w, _ = scene.feature_grid.shape
    probs = classify_batch(m_old, pack.feats)
    old_max = probs[:, :-1].max(axis=1)
    old_arg = probs[:, :-1].argmax(axis=1)
    conf = np.nonzero(old_max > cfg.eta)[0]
    if conf.size == 0:
        return []
    deltas = np.einsum("ndf,nf->nd", m_old.w_reg[old_arg[conf]], pack.feats[conf])
    boxes = apply_delta_batch(pack.cand[conf], deltas, clip_wh=(w, h))
    gt_boxes = np.stack([g.box.as_array() for g in gt]) if gt else np.zeros((0, 4))
    idx, weights = _select_core(boxes, old_max[conf], gt_boxes, cfg)
    classes = m_old.known_classes
    return [
        WeightedAnnotation(BBox(*boxes[i]), classes[old_arg[conf[i]]], float(wt), PSEUDO)
        for i, wt in zip(idx, weights)
    ]


def merge_targets(
    gt: list[WeightedAnnotation],
    pseudo: list[WeightedAnnotation],
    current_classes,
) -> list[WeightedAnnotation]:
    """Concatenate ground truth and pseudo labels; pseudo classes must not
    belong to the current stage."""
    current = set(current_classes)
    for p in pseudo:
        if p.class_id in current:
            raise ValueError(f"stage violation: pseudo class {p.class_id} is a current class")
    return list(gt) + list(pseudo)
