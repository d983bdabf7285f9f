"""Teacher-to-student distillation for the classification and box heads.

Two teachers cover complementary class groups: the previous-stage model
knows old classes, a current-stage expert knows new ones.  Regions are
split by ground-truth overlap; on each side the primary teacher keeps
its foreground probabilities and the other teacher's distribution is
folded into the primary's background mass, yielding a full-length target
distribution for KL distillation.  Box outputs are distilled in delta
coordinates from whichever teacher owns the region.  A single-teacher
variant (background and new classes lumped together) is kept as the
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import (
    DetectorModel,
    Grads,
    ProbVector,
    Proposal,
    ScenePack,
    classify_batch,
    clipped_logits,
    objectness_scores,
    pack_scene,
    propose,
    regress_all,
    softmax_rows,
)
from .geom import BBox, iou_matrix
from .synth import Scene

R1 = "R1"
R2 = "R2"
_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    lambda2: float = 0.5
    box_mode: str = "part"  # "part": primary teacher's classes only; "all": both blocks
    n_top: int = 128
    n_sample: int = 64
    alpha: float = 1.0  # weight of the distillation term in the total loss

    def __post_init__(self):
        if not 0.0 < self.lambda2 <= 1.0:
            raise ValueError(f"lambda2 outside (0,1]: {self.lambda2}")
        if self.box_mode not in ("part", "all"):
            raise ValueError(f"unknown box distillation mode: {self.box_mode}")


@dataclass
class RegionPartition:
    regions: list[Proposal]
    r1_indices: list[int]  # max IoU with gt <= lambda2 (boundary included)
    r2_indices: list[int]


@dataclass
class DistillTarget:
    probs: np.ndarray  # length |old| + |new| + 1, background last
    target_box: BBox | None
    region_tag: str
    box_in_scope: bool = True


def select_distill_regions(
    m_old: DetectorModel,
    scene: Scene,
    rng: np.random.Generator,
    n_top: int = 128,
    n_sample: int = 64,
) -> list[Proposal]:
    """Uniform sample (without replacement) from the old model's
    highest-objectness candidates."""
    props = propose(m_old, scene)
    pool = props[: min(n_top, len(props))]
    k = min(n_sample, len(pool))
    if k == 0:
        return []
    sel = rng.choice(len(pool), size=k, replace=False)
    return [pool[int(i)] for i in sel]


def partition_regions(regions: list[Proposal], gt_boxes: list[BBox], lambda2: float) -> RegionPartition:
    """Split regions by max IoU against ground truth: <= lambda2 goes to R1."""
    if not 0.0 < lambda2 <= 1.0:
        raise ValueError(f"lambda2 outside (0,1]: {lambda2}")
    if not regions:
        return RegionPartition([], [], [])
    if gt_boxes:
        boxes = np.stack([r.box.as_array() for r in regions])
        gts = np.stack([b.as_array() for b in gt_boxes])
        max_iou = iou_matrix(boxes, gts).max(axis=1)
    else:
        max_iou = np.zeros(len(regions))
    r1 = [i for i in range(len(regions)) if max_iou[i] <= lambda2]
    r2 = [i for i in range(len(regions)) if max_iou[i] > lambda2]
    return RegionPartition(list(regions), r1, r2)


def _merge_positions(old_classes, new_classes) -> tuple[np.ndarray, np.ndarray, int]:
    if set(old_classes) & set(new_classes):
        raise ValueError("teacher class sets overlap")
    merged = sorted(old_classes + new_classes)
    pos = {c: i for i, c in enumerate(merged)}
    old_pos = np.array([pos[c] for c in old_classes], dtype=int)
    new_pos = np.array([pos[c] for c in new_classes], dtype=int)
    return old_pos, new_pos, len(merged)


def compose_target_r1(p_old: ProbVector, p_im: ProbVector) -> DistillTarget:
    """Old model is primary: its background mass is redistributed over the
    expert's distribution (new classes and background)."""
    old_pos, new_pos, n = _merge_positions(p_old.classes, p_im.classes)
    out = np.zeros(n + 1)
    out[old_pos] = p_old.probs[:-1]
    scaled = p_im.probs * p_old.background
    out[new_pos] = scaled[:-1]
    out[-1] = scaled[-1]
    return DistillTarget(out, None, R1)


def compose_target_r2(p_old: ProbVector, p_im: ProbVector) -> DistillTarget:
    """Expert is primary: the old model's distribution is folded into the
    expert's background mass; new-class entries pass through unscaled."""
    old_pos, new_pos, n = _merge_positions(p_old.classes, p_im.classes)
    out = np.zeros(n + 1)
    out[old_pos] = p_old.probs[:-1] * p_im.background
    out[new_pos] = p_im.probs[:-1]
    out[-1] = p_old.background * p_im.background
    return DistillTarget(out, None, R2)


def kl_div(target, student) -> float:
    """Sum of t*log(t/s) with 0*log(0/.) = 0 and s floored at 1e-12."""
    t = np.asarray(getattr(target, "probs", target), dtype=float)
    s = np.asarray(getattr(student, "probs", student), dtype=float)
    if t.shape != s.shape:
        raise ValueError("distribution length mismatch")
    mask = t > 0
    return float((t[mask] * (np.log(t[mask]) - np.log(np.maximum(s[mask], _PROB_FLOOR)))).sum())


def box_distill_loss(
    region_tag: str,
    mode: str,
    teacher_old: dict[int, np.ndarray],
    teacher_new: dict[int, np.ndarray],
    student: dict[int, np.ndarray],
) -> float:
    """Squared-error box distillation over the classes in scope.

    Deltas are per-class (dx, dy, dw, dh) maps keyed by class id; the old
    teacher supplies old-class deltas, the expert new-class ones.  "part"
    keeps only the primary teacher's block (old for R1, new for R2);
    "all" distills both blocks regardless of the tag.
    """
    if mode not in ("part", "all"):
        raise ValueError(f"unknown box distillation mode: {mode}")
    if region_tag not in (R1, R2):
        raise ValueError(f"unknown region tag: {region_tag}")
    blocks: list[dict[int, np.ndarray]] = []
    if mode == "all" or (mode == "part" and region_tag == R1):
        blocks.append(teacher_old)
    if mode == "all" or (mode == "part" and region_tag == R2):
        blocks.append(teacher_new)
    loss = 0.0
    for block in blocks:
        for cid, tdelta in block.items():
            diff = np.asarray(student[cid], float) - np.asarray(tdelta, float)
            loss += 0.5 * float((diff**2).sum())
    return loss


# ---------------------------------------------------------------------------
# cached per-scene distillation state (teachers are frozen during a stage)

@dataclass
class DistillCache:
    pool_feats: np.ndarray  # (P, F+1)
    target_probs: np.ndarray  # (P, K+1) composed teacher distributions
    scope: np.ndarray  # (P, K) bool: classes with box distillation
    teacher_deltas: np.ndarray  # (P, K, 4), meaningful where scope holds
    tags: np.ndarray  # (P,) 1 for R1, 2 for R2
    n_sample: int


def build_dwf_cache(
    pack: ScenePack,
    m_old: DetectorModel,
    m_im: DetectorModel,
    student_classes: tuple[int, ...],
    gt_boxes: list[BBox],
    cfg: DistillConfig,
) -> DistillCache | None:
    """Precompute region pool, composed targets, and teacher deltas."""
    obj = objectness_scores(m_old, pack.feats)
    order = np.argsort(-obj, kind="stable")
    pool = order[: min(cfg.n_top, order.size)]
    if pool.size == 0:
        return None
    feats = pack.feats[pool]
    p_old = classify_batch(m_old, feats)
    p_im = classify_batch(m_im, feats)

    old_pos, new_pos, n = _merge_positions(m_old.known_classes, m_im.known_classes)
    if tuple(sorted(m_old.known_classes + m_im.known_classes)) != tuple(student_classes):
        raise ValueError("teacher classes do not cover the student registry")

    if gt_boxes:
        gts = np.stack([b.as_array() for b in gt_boxes])
        max_iou = iou_matrix(pack.cand[pool], gts).max(axis=1)
    else:
        max_iou = np.zeros(pool.size)
    is_r1 = max_iou <= cfg.lambda2

    targets = np.zeros((pool.size, n + 1))
    # R1: old primary
    targets[np.ix_(is_r1, old_pos)] = p_old[is_r1, :-1]
    scaled_im = p_im[is_r1] * p_old[is_r1, -1:]
    targets[np.ix_(is_r1, new_pos)] = scaled_im[:, :-1]
    targets[is_r1, -1] = scaled_im[:, -1]
    # R2: expert primary
    r2 = ~is_r1
    targets[np.ix_(r2, old_pos)] = p_old[r2, :-1] * p_im[r2, -1:]
    targets[np.ix_(r2, new_pos)] = p_im[r2, :-1]
    targets[r2, -1] = p_old[r2, -1] * p_im[r2, -1]

    d_old = regress_all(m_old, feats)  # (P, K_old, 4)
    d_im = regress_all(m_im, feats)  # (P, K_new, 4)
    teacher = np.zeros((pool.size, n, 4))
    teacher[:, old_pos] = d_old
    teacher[:, new_pos] = d_im
    scope = np.zeros((pool.size, n), dtype=bool)
    if cfg.box_mode == "all":
        scope[:] = True
    else:
        scope[np.ix_(is_r1, old_pos)] = True
        scope[np.ix_(r2, new_pos)] = True

    return DistillCache(
        pool_feats=feats,
        target_probs=targets,
        scope=scope,
        teacher_deltas=teacher,
        tags=np.where(is_r1, 1, 2),
        n_sample=cfg.n_sample,
    )


def dwf_from_cache(
    cache: DistillCache | None, m_cur: DetectorModel, rng: np.random.Generator
) -> tuple[float, Grads]:
    """KL + box distillation on a fresh region sample; analytic gradients
    through the student only, averaged over sampled regions."""
    grads = Grads.zeros_like(m_cur)
    if cache is None or cache.pool_feats.shape[0] == 0:
        return 0.0, grads
    p = cache.pool_feats.shape[0]
    k = min(cache.n_sample, p)
    sel = rng.choice(p, size=k, replace=False)
    feats = cache.pool_feats[sel]
    targets = cache.target_probs[sel]

    z, active = clipped_logits(m_cur.w_cls, feats)
    student = softmax_rows(z)
    tmask = targets > 0
    logt = np.where(tmask, np.log(np.maximum(targets, _PROB_FLOOR)), 0.0)
    logs = np.log(np.maximum(student, _PROB_FLOOR))
    kl_total = float((targets * (logt - logs))[tmask].sum())
    dz = (student - targets) / k
    dz *= active
    grads.w_cls += dz.T @ feats

    d_cur = regress_all(m_cur, feats)
    diff = (d_cur - cache.teacher_deltas[sel]) * cache.scope[sel][:, :, None]
    box_total = 0.5 * float((diff**2).sum())
    grads.w_reg += np.einsum("nkd,nf->kdf", diff, feats) / k

    return (kl_total + box_total) / k, grads


def dwf_loss(
    scene: Scene,
    m_old: DetectorModel,
    m_im: DetectorModel,
    m_cur: DetectorModel,
    gt,
    cfg: DistillConfig,
    rng: np.random.Generator,
) -> tuple[float, Grads]:
    """Full dual-teacher distillation loss for one scene.

    gt is the current stage's visible annotations as (BBox, class) pairs.
    """
    pack = pack_scene(scene, m_old.window_sizes, m_old.window_stride)
    gt_boxes = [b for b, _ in gt]
    cache = build_dwf_cache(pack, m_old, m_im, m_cur.known_classes, gt_boxes, cfg)
    return dwf_from_cache(cache, m_cur, rng)


# ---------------------------------------------------------------------------
# single-teacher baseline

def ukd_loss(p_old: ProbVector, p_student: ProbVector) -> float:
    """Cross-entropy from the old model's distribution to the student, with
    the student's background and new-class mass treated as one entity;
    normalized by the old class count + 1 and negated for minimization.
    """
    old = p_old.classes
    student_classes = p_student.classes
    if not set(old) <= set(student_classes):
        raise ValueError("student must know every old class")
    new = [c for c in student_classes if c not in set(old)]
    s_old = np.array([p_student.prob(c) for c in old])
    group = p_student.background + sum(p_student.prob(c) for c in new)
    k = len(old) + 1
    val = p_old.background * np.log(max(group, _PROB_FLOOR))
    val += float((p_old.probs[:-1] * np.log(np.maximum(s_old, _PROB_FLOOR))).sum())
    return -val / k


@dataclass
class UkdCache:
    pool_feats: np.ndarray  # (P, F+1)
    teacher_probs: np.ndarray  # (P, K_old+1)
    old_rows: np.ndarray  # positions of old classes in the student ordering
    group_rows: np.ndarray  # positions of new classes + background
    n_sample: int


def build_ukd_cache(
    pack: ScenePack,
    m_old: DetectorModel,
    student_classes: tuple[int, ...],
    cfg: DistillConfig,
) -> UkdCache | None:
    obj = objectness_scores(m_old, pack.feats)
    order = np.argsort(-obj, kind="stable")
    pool = order[: min(cfg.n_top, order.size)]
    if pool.size == 0:
        return None
    feats = pack.feats[pool]
    pos = {c: i for i, c in enumerate(student_classes)}
    old_rows = np.array([pos[c] for c in m_old.known_classes], dtype=int)
    new_rows = [pos[c] for c in student_classes if c not in set(m_old.known_classes)]
    group_rows = np.array(new_rows + [len(student_classes)], dtype=int)
    return UkdCache(feats, classify_batch(m_old, feats), old_rows, group_rows, cfg.n_sample)


def ukd_from_cache(
    cache: UkdCache | None, m_cur: DetectorModel, rng: np.random.Generator
) -> tuple[float, Grads]:
    grads = Grads.zeros_like(m_cur)
    if cache is None or cache.pool_feats.shape[0] == 0:
        return 0.0, grads
    p = cache.pool_feats.shape[0]
    k = min(cache.n_sample, p)
    sel = rng.choice(p, size=k, replace=False)
    feats = cache.pool_feats[sel]
    teacher = cache.teacher_probs[sel]

    z, active = clipped_logits(m_cur.w_cls, feats)
    s = softmax_rows(z)
    norm = teacher.shape[1]  # |old classes| + 1
    group = np.maximum(s[:, cache.group_rows].sum(axis=1), _PROB_FLOOR)
    s_old = np.maximum(s[:, cache.old_rows], _PROB_FLOOR)
    vals = teacher[:, -1] * np.log(group) + (teacher[:, :-1] * np.log(s_old)).sum(axis=1)
    loss = float(-(vals.sum()) / (norm * k))

    a_bg = teacher[:, -1]
    a_mass = teacher[:, :-1].sum(axis=1)
    in_group = np.zeros(s.shape[1])
    in_group[cache.group_rows] = 1.0
    dz = a_bg[:, None] * s * (in_group[None, :] / group[:, None] - 1.0)
    dz[np.arange(k)[:, None], cache.old_rows[None, :]] += teacher[:, :-1]
    dz -= s * a_mass[:, None]
    dz *= -1.0 / (norm * k)
    dz *= active
    grads.w_cls += dz.T @ feats
    return loss, grads
