"""Salient-region exclusion: keep likely unlabeled objects out of the
negative pool.

A spatial attention map (softmax over per-cell absolute feature energy)
scores every candidate region; regions that are salient, confidently
object-like, and far from every known target are withheld from negative
sampling for the classification head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import Proposal
from .geom import iou_matrix, region_means
from .bridge_past import WeightedAnnotation


@dataclass(frozen=True)
class BFConfig:
    p_exponent: float = 2.0
    attn_pct: float = 80.0  # per-scene percentile over proposal attention scores
    obj_thresh: float = 0.5
    known_iou: float = 0.5
    use_attention: bool = True
    use_objectness: bool = True

    def __post_init__(self):
        if self.p_exponent <= 0:
            raise ValueError(f"p_exponent must be positive: {self.p_exponent}")
        if not 0.0 <= self.attn_pct <= 100.0:
            raise ValueError(f"attn_pct outside [0,100]: {self.attn_pct}")


@dataclass
class AttentionMap:
    grid: np.ndarray  # (H, W), positive, sums to 1
    p_exponent: float


@dataclass
class DiscardCandidate:
    proposal: Proposal
    attention_score: float
    discarded: bool


def attention_map(feature_grid: np.ndarray, p_exponent: float = 2.0) -> AttentionMap:
    """Spatial softmax of the channel-summed |feature|^p energy."""
    if p_exponent <= 0:
        raise ValueError(f"p_exponent must be positive: {p_exponent}")
    if not np.all(np.isfinite(feature_grid)):
        raise ValueError("non-finite features")
    energy = np.abs(feature_grid.astype(float)) ** p_exponent
    s = energy.sum(axis=2) if feature_grid.ndim == 3 else energy
    flat = s - s.max()
    e = np.exp(flat)
    return AttentionMap(grid=e / e.sum(), p_exponent=p_exponent)


def region_attention_scores(amap: AttentionMap, boxes: np.ndarray) -> np.ndarray:
    """Mean attention per box (center-inclusion pooling)."""
    means, counts = region_means(amap.grid, boxes)
    return np.where(counts > 0, means, 0.0)


def discard_mask(
    attn_scores: np.ndarray,
    objectness: np.ndarray,
    max_target_iou: np.ndarray,
    cfg: BFConfig,
) -> np.ndarray:
    """Boolean mask of proposals to withhold from negative sampling.

    A proposal is discarded iff every enabled salience clause passes
    (attention >= the per-scene percentile, objectness >= threshold) and
    it stays clear of all known targets.  With both salience clauses
    disabled, nothing is discarded.
    """
    if not (cfg.use_attention or cfg.use_objectness):
        return np.zeros(attn_scores.shape[0], dtype=bool)
    mask = max_target_iou < cfg.known_iou
    if cfg.use_attention:
        mask &= attn_scores >= np.percentile(attn_scores, cfg.attn_pct)
    if cfg.use_objectness:
        mask &= objectness >= cfg.obj_thresh
    return mask


def select_discard_set(
    proposals: list[Proposal],
    amap: AttentionMap,
    targets: list[WeightedAnnotation],
    cfg: BFConfig,
) -> list[DiscardCandidate]:
    if not proposals:
        return []
    boxes = np.stack([p.box.as_array() for p in proposals])
    attn = region_attention_scores(amap, boxes)
    obj = np.array([p.objectness for p in proposals])
    if targets:
        tboxes = np.stack([t.box.as_array() for t in targets])
        max_iou = iou_matrix(boxes, tboxes).max(axis=1)
    else:
        max_iou = np.zeros(len(proposals))
    mask = discard_mask(attn, obj, max_iou, cfg)
    return [
        DiscardCandidate(proposal=p, attention_score=float(a), discarded=bool(d))
        for p, a, d in zip(proposals, attn, mask)
    ]


def sample_negatives(
    proposals: list[Proposal],
    targets: list[WeightedAnnotation],
    discard_set: list[DiscardCandidate],
    rng: np.random.Generator,
    count: int,
    neg_iou: float = 0.3,
    pool_size: int = 256,
) -> tuple[list[int], bool]:
    """Negative sampling from the top-objectness band, with discarded
    candidates removed before the draw.

    Returns (sampled proposal indices, exhausted flag); the flag is set
    when the eligible pool is empty while negatives were requested.
    """
    from .detector import top_objectness_pool

    if not proposals:
        return [], count > 0
    boxes = np.stack([p.box.as_array() for p in proposals])
    if targets:
        tboxes = np.stack([t.box.as_array() for t in targets])
        max_iou = iou_matrix(boxes, tboxes).max(axis=1)
    else:
        max_iou = np.zeros(len(proposals))
    band = np.nonzero(max_iou < neg_iou)[0]
    obj = np.array([p.objectness for p in proposals])
    pool = top_objectness_pool(obj, band, pool_size)
    drop = {k for k, cand in enumerate(discard_set) if cand.discarded}
    pool = np.array([i for i in pool if i not in drop], dtype=int)
    if pool.size == 0:
        return [], count > 0
    take = min(count, pool.size)
    return sorted(int(i) for i in rng.choice(pool, size=take, replace=False)), False
