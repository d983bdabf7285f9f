"""Minimal trainable two-stage detector on feature-grid scenes.

A model is three linear heads over mean-pooled region features:
an objectness scorer (logistic), a softmax classifier over its known
classes plus background (background always last), and one 4-vector box
regressor per known class in the center/log-size delta parameterization.
Candidate regions are a fixed sliding-window grid, so the only learned
state is the head weights; gradients are analytic and training is plain
SGD.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .geom import BBox, box_cell_spans, integral_table, iou_matrix, nms_indices
from .synth import ClassRegistry, Scene, StageDataset

LOGIT_CLIP = 50.0
_DELTA_SIZE_CLIP = 4.0  # cap on dw/dh before exponentiation


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    epochs: int = 30
    rois_per_scene: int = 32
    pos_fraction: float = 0.25
    all_positives: bool = True  # use every positive window; negatives keep the 1:3 ratio
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    neg_pool_size: int = 128  # negatives drawn from the top-objectness band
    box_loss_weight: float = 1.0
    window_sizes: tuple[int, ...] = (4, 5)
    window_stride: int = 1


@dataclass
class ProbVector:
    """Classification distribution over `classes` + background (last)."""

    probs: np.ndarray
    classes: tuple[int, ...]

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (len(self.classes) + 1,):
            raise ValueError("probs length must be len(classes)+1")

    @property
    def background(self) -> float:
        return float(self.probs[-1])

    def prob(self, class_id: int) -> float:
        return float(self.probs[self.classes.index(class_id)])

    def argmax_foreground(self) -> int:
        return self.classes[int(np.argmax(self.probs[:-1]))]

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > tol:
            raise ValueError("not a normalized probability vector")


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness outside [0,1]: {self.objectness}")


@dataclass
class Detection:
    box: BBox
    probs: ProbVector
    proposal: Proposal


@dataclass
class DetectorModel:
    registry: ClassRegistry
    known_classes: tuple[int, ...]  # sorted ascending; background implicit last
    trained_through_stage: int
    w_cls: np.ndarray  # (K+1, F+1), bias folded into the last feature entry
    w_reg: np.ndarray  # (K, 4, F+1)
    w_obj: np.ndarray  # (F+1,)
    window_sizes: tuple[int, ...] = (4, 5)
    window_stride: int = 1
    proposal_threshold: float = 0.0  # min objectness admitted at inference

    @property
    def feat_dim(self) -> int:
        return self.w_cls.shape[1] - 1

    @property
    def background_row(self) -> int:
        return len(self.known_classes)

    def class_row(self, class_id: int) -> int:
        try:
            return self.known_classes.index(class_id)
        except ValueError:
            raise KeyError(f"unknown class {class_id}") from None

    def clone(self) -> "DetectorModel":
        return dataclasses.replace(
            self, w_cls=self.w_cls.copy(), w_reg=self.w_reg.copy(), w_obj=self.w_obj.copy()
        )


def new_model(
    registry: ClassRegistry,
    classes,
    feat_dim: int,
    cfg: TrainConfig,
    stage: int,
) -> DetectorModel:
    known = tuple(sorted(classes))
    k = len(known)
    return DetectorModel(
        registry=registry,
        known_classes=known,
        trained_through_stage=stage,
        w_cls=np.zeros((k + 1, feat_dim + 1)),
        w_reg=np.zeros((k, 4, feat_dim + 1)),
        w_obj=np.zeros(feat_dim + 1),
        window_sizes=cfg.window_sizes,
        window_stride=cfg.window_stride,
    )


@dataclass
class Grads:
    w_cls: np.ndarray
    w_reg: np.ndarray
    w_obj: np.ndarray

    @staticmethod
    def zeros_like(model: DetectorModel) -> "Grads":
        return Grads(
            np.zeros_like(model.w_cls), np.zeros_like(model.w_reg), np.zeros_like(model.w_obj)
        )

    def add_scaled(self, other: "Grads", scale: float = 1.0) -> "Grads":
        self.w_cls += scale * other.w_cls
        self.w_reg += scale * other.w_reg
        self.w_obj += scale * other.w_obj
        return self


# ---------------------------------------------------------------------------
# candidate windows and pooled features

def candidate_boxes(h: int, w: int, sizes, stride: int) -> np.ndarray:
    """All sliding-window placements as an (N, 4) array, fixed order."""
    out = []
    for sh in sizes:
        for sw in sizes:
            if sh > h or sw > w:
                continue
            for y0 in range(0, h - sh + 1, stride):
                for x0 in range(0, w - sw + 1, stride):
                    out.append((x0, y0, x0 + sw, y0 + sh))
    return np.array(out, dtype=float).reshape(-1, 4)


@dataclass
class ScenePack:
    """Per-scene cache: candidate windows and their pooled features."""

    scene: Scene
    cand: np.ndarray  # (N, 4)
    feats: np.ndarray  # (N, F+1), bias appended


def pack_scene(scene: Scene, sizes, stride: int) -> ScenePack:
    h, w, c = scene.feature_grid.shape
    cand = candidate_boxes(h, w, sizes, stride)
    table = integral_table(scene.feature_grid)
    i0, i1, j0, j1 = box_cell_spans(cand, h, w)
    sums = table[i1, j1] - table[i0, j1] - table[i1, j0] + table[i0, j0]
    counts = ((i1 - i0) * (j1 - j0)).astype(float)
    feats = np.empty((cand.shape[0], c + 1))
    feats[:, :c] = sums / counts[:, None]
    feats[:, c] = 1.0
    return ScenePack(scene=scene, cand=cand, feats=feats)


def roi_feature(scene: Scene, box: BBox) -> np.ndarray:
    """Per-channel mean over cells inside the box, bias term appended."""
    h, w, c = scene.feature_grid.shape
    i0, i1, j0, j1 = (v[0] for v in box_cell_spans(box.as_array()[None, :], h, w))
    if i1 <= i0 or j1 <= j0:
        raise ValueError("empty region")
    mean = scene.feature_grid[i0:i1, j0:j1].mean(axis=(0, 1))
    return np.append(mean, 1.0)


# ---------------------------------------------------------------------------
# heads

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clipped_logits(weights: np.ndarray, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rows of feats @ weights.T, clipped to +/-LOGIT_CLIP; also returns the
    mask of entries where the clip is inactive (gradient passes through)."""
    z = feats @ weights.T
    active = np.abs(z) < LOGIT_CLIP
    return np.clip(z, -LOGIT_CLIP, LOGIT_CLIP), active


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def class_logits(model: DetectorModel, feat: np.ndarray) -> np.ndarray:
    return np.clip(feat @ model.w_cls.T, -LOGIT_CLIP, LOGIT_CLIP)


def classify(model: DetectorModel, feat: np.ndarray) -> ProbVector:
    z, _ = clipped_logits(model.w_cls, feat[None, :])
    return ProbVector(softmax_rows(z)[0], model.known_classes)


def classify_batch(model: DetectorModel, feats: np.ndarray) -> np.ndarray:
    z, _ = clipped_logits(model.w_cls, feats)
    return softmax_rows(z)


def objectness_scores(model: DetectorModel, feats: np.ndarray) -> np.ndarray:
    return _sigmoid(feats @ model.w_obj)


def regress(model: DetectorModel, feat: np.ndarray, class_id: int) -> np.ndarray:
    """Box delta (dx, dy, dw, dh) predicted for one class."""
    return model.w_reg[model.class_row(class_id)] @ feat


def regress_all(model: DetectorModel, feats: np.ndarray) -> np.ndarray:
    """(N, K, 4) deltas for every known class."""
    return np.einsum("kdf,nf->nkd", model.w_reg, feats)


def encode_delta(proposal: BBox, target: BBox) -> np.ndarray:
    pw, ph = proposal.width, proposal.height
    if pw <= 0 or ph <= 0 or target.width <= 0 or target.height <= 0:
        raise ValueError("degenerate box in delta encoding")
    dx = ((target.x_min + target.x_max) - (proposal.x_min + proposal.x_max)) / (2 * pw)
    dy = ((target.y_min + target.y_max) - (proposal.y_min + proposal.y_max)) / (2 * ph)
    return np.array([dx, dy, np.log(target.width / pw), np.log(target.height / ph)])


def apply_delta(proposal: BBox, delta: np.ndarray, clip_wh: tuple[float, float] | None = None) -> BBox:
    boxes = apply_delta_batch(proposal.as_array()[None, :], np.asarray(delta, float)[None, :], clip_wh)
    return BBox(*boxes[0])


def apply_delta_batch(
    boxes: np.ndarray, deltas: np.ndarray, clip_wh: tuple[float, float] | None = None
) -> np.ndarray:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w + deltas[:, 0] * w
    cy = boxes[:, 1] + 0.5 * h + deltas[:, 1] * h
    nw = w * np.exp(np.clip(deltas[:, 2], -_DELTA_SIZE_CLIP, _DELTA_SIZE_CLIP))
    nh = h * np.exp(np.clip(deltas[:, 3], -_DELTA_SIZE_CLIP, _DELTA_SIZE_CLIP))
    out = np.stack([cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh], axis=1)
    if clip_wh is not None:
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, clip_wh[0])
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, clip_wh[1])
    return out


def propose(model: DetectorModel, scene: Scene, pack: ScenePack | None = None) -> list[Proposal]:
    """All candidate windows scored by objectness, highest first (stable)."""
    if pack is None:
        pack = pack_scene(scene, model.window_sizes, model.window_stride)
    scores = objectness_scores(model, pack.feats)
    order = np.argsort(-scores, kind="stable")
    return [Proposal(BBox(*pack.cand[i]), float(scores[i])) for i in order]


# ---------------------------------------------------------------------------
# losses

@dataclass
class RoiBatch:
    """One training batch: weighted classification samples, box-regression
    rows for the positives, and objectness samples."""

    feats: np.ndarray  # (N, F+1)
    labels: np.ndarray  # (N,) rows into w_cls; background = K
    weights: np.ndarray  # (N,)
    box_feats: np.ndarray  # (P, F+1)
    box_rows: np.ndarray  # (P,) rows into w_reg
    box_targets: np.ndarray  # (P, 4)
    box_weights: np.ndarray  # (P,)
    obj_feats: np.ndarray  # (M, F+1)
    obj_labels: np.ndarray  # (M,) in {0, 1}
    obj_weights: np.ndarray  # (M,)

    @staticmethod
    def empty(feat_dim: int) -> "RoiBatch":
        f = feat_dim + 1
        return RoiBatch(
            np.zeros((0, f)), np.zeros(0, dtype=int), np.zeros(0),
            np.zeros((0, f)), np.zeros(0, dtype=int), np.zeros((0, 4)), np.zeros(0),
            np.zeros((0, f)), np.zeros(0), np.zeros(0),
        )


def loss_and_grads(
    model: DetectorModel, batch: RoiBatch, box_loss_weight: float = 1.0
) -> tuple[float, Grads]:
    """Weighted cross-entropy + squared-error box loss + objectness BCE.

    Classification and box terms are normalized by the classification
    sample count, objectness by its own count.  Gradients are analytic.
    """
    for w in (batch.weights, batch.box_weights, batch.obj_weights):
        if w.size and w.min() < 0:
            raise ValueError("negative sample weight")
    grads = Grads.zeros_like(model)
    loss = 0.0
    n = max(1, batch.feats.shape[0])

    if batch.feats.shape[0]:
        z, active = clipped_logits(model.w_cls, batch.feats)
        probs = softmax_rows(z)
        rows = np.arange(batch.feats.shape[0])
        logp = np.log(np.maximum(probs[rows, batch.labels], 1e-300))
        loss += float(-(batch.weights * logp).sum() / n)
        dz = probs.copy()
        dz[rows, batch.labels] -= 1.0
        dz *= batch.weights[:, None] / n
        dz *= active
        grads.w_cls += dz.T @ batch.feats

    if batch.box_feats.shape[0]:
        pred = np.einsum("pdf,pf->pd", model.w_reg[batch.box_rows], batch.box_feats)
        diff = pred - batch.box_targets
        loss += float(box_loss_weight * 0.5 * (batch.box_weights * (diff**2).sum(axis=1)).sum() / n)
        dd = box_loss_weight * batch.box_weights[:, None] * diff / n
        np.add.at(grads.w_reg, batch.box_rows, dd[:, :, None] * batch.box_feats[:, None, :])

    if batch.obj_feats.shape[0]:
        m = batch.obj_feats.shape[0]
        x = batch.obj_feats @ model.w_obj
        # softplus(x) - y*x == -(y log s + (1-y) log(1-s)) for s = sigmoid(x)
        softplus = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        loss += float((batch.obj_weights * (softplus - batch.obj_labels * x)).sum() / m)
        dx = batch.obj_weights * (_sigmoid(x) - batch.obj_labels) / m
        grads.w_obj += dx @ batch.obj_feats

    return loss, grads


def sgd_step(model: DetectorModel, grads: Grads, lr: float) -> DetectorModel:
    for g in (grads.w_cls, grads.w_reg, grads.w_obj):
        if not np.all(np.isfinite(g)):
            raise RuntimeError("divergence: non-finite gradient")
    return dataclasses.replace(
        model,
        w_cls=model.w_cls - lr * grads.w_cls,
        w_reg=model.w_reg - lr * grads.w_reg,
        w_obj=model.w_obj - lr * grads.w_obj,
    )


# ---------------------------------------------------------------------------
# RoI sampling

@dataclass
class TargetSet:
    """Training targets for one scene as flat arrays (weight 1 for gt)."""

    boxes: np.ndarray  # (T, 4)
    class_ids: np.ndarray  # (T,)
    weights: np.ndarray  # (T,)

    @staticmethod
    def from_pairs(pairs) -> "TargetSet":
        if not pairs:
            return TargetSet(np.zeros((0, 4)), np.zeros(0, dtype=int), np.zeros(0))
        return TargetSet(
            np.stack([b.as_array() for b, _ in pairs]),
            np.array([c for _, c in pairs], dtype=int),
            np.ones(len(pairs)),
        )


@dataclass
class SampleInfo:
    pos_idx: np.ndarray
    neg_idx: np.ndarray
    obj_neg_idx: np.ndarray
    neg_exhausted: bool


@dataclass
class RoiAssignment:
    """Static candidate-to-target matching for one scene (targets fixed)."""

    max_iou: np.ndarray
    match: np.ndarray
    pos_pool: np.ndarray
    neg_pool: np.ndarray


def assign_rois(pack: ScenePack, targets: TargetSet, cfg: TrainConfig) -> RoiAssignment:
    n_cand = pack.cand.shape[0]
    if targets.boxes.shape[0]:
        ious = iou_matrix(pack.cand, targets.boxes)
        max_iou = ious.max(axis=1)
        match = ious.argmax(axis=1)
    else:
        max_iou = np.zeros(n_cand)
        match = np.zeros(n_cand, dtype=int)
    return RoiAssignment(
        max_iou=max_iou,
        match=match,
        pos_pool=np.nonzero(max_iou >= cfg.pos_iou)[0],
        neg_pool=np.nonzero(max_iou < cfg.neg_iou)[0],
    )


def _choice(rng: np.random.Generator, pool: np.ndarray, k: int) -> np.ndarray:
    if pool.size == 0 or k <= 0:
        return np.zeros(0, dtype=int)
    return np.sort(rng.choice(pool, size=min(k, pool.size), replace=False))


def top_objectness_pool(objectness: np.ndarray, band: np.ndarray, k: int) -> np.ndarray:
    """Members of `band` whose objectness reaches the k-th largest value in
    the band (ties included, so a score-flat model yields the whole band)."""
    if band.size <= k:
        return band
    scores = objectness[band]
    thresh = np.partition(scores, band.size - k)[band.size - k]
    return band[scores >= thresh]


def make_roi_batch(
    model: DetectorModel,
    pack: ScenePack,
    targets: TargetSet,
    cfg: TrainConfig,
    rng: np.random.Generator,
    discard_idx: np.ndarray | None = None,
    assign: RoiAssignment | None = None,
) -> tuple[RoiBatch, SampleInfo]:
    """Sample positives/negatives against the targets and assemble a batch.

    Positives: IoU >= pos_iou over all candidates, labeled and weighted by
    the matched target, with encoded box deltas.  Classification negatives:
    IoU < neg_iou restricted to the current top-objectness proposal pool,
    minus any candidates in discard_idx.  Objectness negatives are drawn
    from the full band independently and are never subject to discard.
    """
    if assign is None:
        assign = assign_rois(pack, targets, cfg)
    match = assign.match
    pos_pool, neg_pool = assign.pos_pool, assign.neg_pool

    if cfg.all_positives:
        pos_idx = pos_pool
        n_neg_want = max(
            cfg.rois_per_scene,
            int(round(pos_idx.size * (1.0 - cfg.pos_fraction) / cfg.pos_fraction)),
        )
    else:
        pos_idx = _choice(rng, pos_pool, int(round(cfg.rois_per_scene * cfg.pos_fraction)))
        n_neg_want = cfg.rois_per_scene - pos_idx.size

    obj = objectness_scores(model, pack.feats)
    roi_neg_pool = top_objectness_pool(obj, neg_pool, cfg.neg_pool_size)
    if discard_idx is not None and discard_idx.size:
        roi_neg_pool = np.setdiff1d(roi_neg_pool, discard_idx, assume_unique=False)
    neg_idx = _choice(rng, roi_neg_pool, n_neg_want)
    neg_exhausted = roi_neg_pool.size == 0 and n_neg_want > 0

    obj_neg_idx = _choice(rng, neg_pool, n_neg_want)

    cls_idx = np.concatenate([pos_idx, neg_idx])
    labels = np.full(cls_idx.size, model.background_row, dtype=int)
    weights = np.ones(cls_idx.size)
    box_targets = np.zeros((pos_idx.size, 4))
    box_rows = np.zeros(pos_idx.size, dtype=int)
    box_weights = np.zeros(pos_idx.size)
    for k, ci in enumerate(pos_idx):
        tj = match[ci]
        labels[k] = model.class_row(int(targets.class_ids[tj]))
        weights[k] = targets.weights[tj]
        box_rows[k] = labels[k]
        box_weights[k] = targets.weights[tj]
        box_targets[k] = encode_delta(BBox(*pack.cand[ci]), BBox(*targets.boxes[tj]))

    obj_idx = np.concatenate([pos_idx, obj_neg_idx])
    batch = RoiBatch(
        feats=pack.feats[cls_idx],
        labels=labels,
        weights=weights,
        box_feats=pack.feats[pos_idx],
        box_rows=box_rows,
        box_targets=box_targets,
        box_weights=box_weights,
        obj_feats=pack.feats[obj_idx],
        obj_labels=np.concatenate([np.ones(pos_idx.size), np.zeros(obj_neg_idx.size)]),
        obj_weights=np.ones(obj_idx.size),
    )
    return batch, SampleInfo(pos_idx, neg_idx, obj_neg_idx, neg_exhausted)


# ---------------------------------------------------------------------------
# training and inference

def _train_rng(seed: int, epoch: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1, epoch, scene_id]))


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: base lr, dropped 10x for the final fifth of training."""
    if cfg.epochs >= 5 and epoch >= int(cfg.epochs * 0.8):
        return cfg.lr * 0.1
    return cfg.lr


def train_supervised(
    dataset: StageDataset,
    classes,
    cfg: TrainConfig,
    seed: int,
    stage: int | None = None,
) -> DetectorModel:
    """Fully supervised training on the dataset's visible annotations.

    Scenes are processed in scene_id order with per-scene RNG streams, so
    the result is invariant to permutations of the input scene list.
    """
    if not dataset.scenes:
        raise ValueError("empty dataset")
    known = set(classes)
    for vis in dataset.visible_annotations:
        for _, cid in vis:
            if cid not in known:
                raise ValueError(f"annotation class {cid} outside training classes")
    registry = dataset.registry
    if stage is None:
        stage = max(registry.stage_of(c) for c in classes)
    feat_dim = dataset.scenes[0].feature_grid.shape[2]
    model = new_model(registry, classes, feat_dim, cfg, stage)

    order = np.argsort([s.scene_id for s in dataset.scenes], kind="stable")
    packs = [pack_scene(dataset.scenes[i], cfg.window_sizes, cfg.window_stride) for i in order]
    target_sets = [TargetSet.from_pairs(dataset.visible_annotations[i]) for i in order]
    assignments = [assign_rois(p, t, cfg) for p, t in zip(packs, target_sets)]

    for epoch in range(cfg.epochs):
        for pack, targets, assign in zip(packs, target_sets, assignments):
            rng = _train_rng(seed, epoch, pack.scene.scene_id)
            batch, _ = make_roi_batch(model, pack, targets, cfg, rng, assign=assign)
            _, grads = loss_and_grads(model, batch, cfg.box_loss_weight)
            model = sgd_step(model, grads, epoch_lr(cfg, epoch))
    return model


def run_heads(model: DetectorModel, scene: Scene, pack: ScenePack | None = None) -> list[Detection]:
    """Full forward pass: every candidate classified and regressed with its
    top foreground class; boxes clamped to the scene extent."""
    if pack is None:
        pack = pack_scene(scene, model.window_sizes, model.window_stride)
    h, w, _ = scene.feature_grid.shape
    probs = classify_batch(model, pack.feats)
    obj = objectness_scores(model, pack.feats)
    best = probs[:, :-1].argmax(axis=1)
    deltas = np.einsum("ndf,nf->nd", model.w_reg[best], pack.feats)
    boxes = apply_delta_batch(pack.cand, deltas, clip_wh=(w, h))
    return [
        Detection(
            box=BBox(*boxes[i]),
            probs=ProbVector(probs[i], model.known_classes),
            proposal=Proposal(BBox(*pack.cand[i]), float(obj[i])),
        )
        for i in range(pack.cand.shape[0])
    ]


def detect_scene(
    model: DetectorModel,
    scene: Scene,
    score_thresh: float = 0.25,
    nms_iou: float = 0.3,
    pack: ScenePack | None = None,
) -> dict[int, list[tuple[BBox, float]]]:
    """Per-class detections for evaluation: class probability as the score,
    NMS over the candidate windows, class-specific regression of the
    survivors."""
    if pack is None:
        pack = pack_scene(scene, model.window_sizes, model.window_stride)
    h, w, _ = scene.feature_grid.shape
    probs = classify_batch(model, pack.feats)
    admitted = objectness_scores(model, pack.feats) >= model.proposal_threshold
    out: dict[int, list[tuple[BBox, float]]] = {}
    for row, cid in enumerate(model.known_classes):
        mask = admitted & (probs[:, row] >= score_thresh)
        idx = np.nonzero(mask)[0]
        if idx.size == 0:
            out[cid] = []
            continue
        scores = probs[idx, row]
        keep = np.array(nms_indices(pack.cand[idx], scores, nms_iou), dtype=int)
        kept = idx[keep]
        deltas = np.einsum("nf,df->nd", pack.feats[kept], model.w_reg[row])
        boxes = apply_delta_batch(pack.cand[kept], deltas, clip_wh=(w, h))
        out[cid] = [(BBox(*b), float(probs[i, row])) for b, i in zip(boxes, kept)]
    return out
