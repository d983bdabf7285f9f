"""Multi-stage incremental training orchestration.

Stage 0 is plain supervised training.  Later stages expand the previous
model with zero-initialized rows for the new classes and train on the
current stage's data only, optionally adding pseudo labels for old
classes, withholding salient unlabeled regions from the negative pool,
and distilling from frozen teachers.  Every stage is evaluated on the
fully-labeled test split and checkpointed.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bridge_future import BFConfig, attention_map, discard_mask, region_attention_scores
from .bridge_past import (
    GROUND_TRUTH,
    WeightedAnnotation,
    collect_pseudo_labels,
    gt_annotations,
    merge_targets,
)
from .config import ExperimentConfig
from .detector import (
    DetectorModel,
    ScenePack,
    TargetSet,
    TrainConfig,
    detect_scene,
    epoch_lr,
    loss_and_grads,
    make_roi_batch,
    objectness_scores,
    pack_scene,
    sgd_step,
    train_supervised,
)
from .distill import (
    DistillConfig,
    build_dwf_cache,
    build_ukd_cache,
    dwf_from_cache,
    ukd_from_cache,
)
from .evaluation import map_report, recall_at_iou
from .geom import BBox, iou_matrix
from .synth import ClassRegistry, StageDataset, build_stage_datasets, cooccurrence_stats, joint_dataset

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class MechanismFlags:
    bridge_past: bool
    bridge_future: bool
    distillation: str  # "none" | "ukd" | "dwf"

    def __post_init__(self):
        if self.distillation not in ("none", "ukd", "dwf"):
            raise ValueError(f"unknown distillation mode: {self.distillation}")


METHOD_FLAGS: dict[str, MechanismFlags] = {
    "finetune": MechanismFlags(False, False, "none"),
    "ukd": MechanismFlags(False, False, "ukd"),
    "bpf": MechanismFlags(True, True, "dwf"),
    "bpf_no_bp": MechanismFlags(False, True, "dwf"),
    "bpf_no_bf": MechanismFlags(True, False, "dwf"),
    "bpf_no_dwf": MechanismFlags(True, True, "ukd"),
}


@dataclass
class StageResult:
    stage_index: int
    method: str
    checkpoint: str
    per_class_ap: dict[int, float | None]
    old_map: float | None
    new_map: float | None
    all_map: float | None
    avg_map: float | None
    stats: dict
    notes: list[str]


def _worker_count() -> int:
    raw = os.environ.get("BPF_SIM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_indexed(fn, items):
    n = _worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


def _stream(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(parts)))


# ---------------------------------------------------------------------------
# model expansion and persistence

def expand_model(m_prev: DetectorModel, new_classes) -> DetectorModel:
    """Grow the classifier/regressor with zero rows for the new classes;
    old weights are copied verbatim and background stays last."""
    new_classes = tuple(sorted(new_classes))
    if set(new_classes) & set(m_prev.known_classes):
        raise ValueError("new classes overlap the existing registry")
    known = tuple(sorted(m_prev.known_classes + new_classes))
    feat = m_prev.feat_dim + 1
    w_cls = np.zeros((len(known) + 1, feat))
    w_reg = np.zeros((len(known), 4, feat))
    for old_row, cid in enumerate(m_prev.known_classes):
        row = known.index(cid)
        w_cls[row] = m_prev.w_cls[old_row]
        w_reg[row] = m_prev.w_reg[old_row]
    w_cls[-1] = m_prev.w_cls[-1]  # background row
    return dataclasses.replace(
        m_prev, known_classes=known, w_cls=w_cls, w_reg=w_reg, w_obj=m_prev.w_obj.copy()
    )


def save_checkpoint(model: DetectorModel, path: str | Path, train_cfg_hash: str = "") -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "registry": [list(s) for s in model.registry.stage_sets],
        "known_classes": list(model.known_classes),
        "trained_through_stage": model.trained_through_stage,
        "w_cls": model.w_cls.tolist(),
        "w_reg": model.w_reg.tolist(),
        "w_obj": model.w_obj.tolist(),
        "window_sizes": list(model.window_sizes),
        "window_stride": model.window_stride,
        "proposal_threshold": model.proposal_threshold,
        "train_cfg_hash": train_cfg_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> DetectorModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint {path} at byte {e.pos}: {e.msg}") from e
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(
            f"checkpoint schema mismatch: got {doc.get('schema_version')}, want {CHECKPOINT_SCHEMA}"
        )
    return DetectorModel(
        registry=ClassRegistry(tuple(tuple(s) for s in doc["registry"])),
        known_classes=tuple(doc["known_classes"]),
        trained_through_stage=int(doc["trained_through_stage"]),
        w_cls=np.array(doc["w_cls"], dtype=float),
        w_reg=np.array(doc["w_reg"], dtype=float),
        w_obj=np.array(doc["w_obj"], dtype=float),
        window_sizes=tuple(doc["window_sizes"]),
        window_stride=int(doc["window_stride"]),
        proposal_threshold=float(doc["proposal_threshold"]),
    )


# ---------------------------------------------------------------------------
# evaluation

def evaluate_model(
    model: DetectorModel,
    test: StageDataset,
    registry: ClassRegistry,
    stage: int,
    cfg: ExperimentConfig,
) -> dict:
    def run(item):
        scene, _ = item
        return detect_scene(model, scene, cfg.eval.score_thresh, cfg.eval.nms_iou)

    per_scene = _map_indexed(run, list(zip(test.scenes, test.visible_annotations)))
    dets_by_class: dict[int, list] = {c: [] for c in model.known_classes}
    for scene, dets in zip(test.scenes, per_scene):
        for cid, entries in dets.items():
            for box, score in entries:
                dets_by_class[cid].append((scene.scene_id, box, score))
    gts_by_class: dict[int, list] = {}
    for scene, vis in zip(test.scenes, test.visible_annotations):
        for box, cid in vis:
            gts_by_class.setdefault(cid, []).append((scene.scene_id, box))
    return map_report(
        dets_by_class, gts_by_class, registry, stage, cfg.eval.iou_thresh, cfg.eval.interp
    )


def _safe_recall(boxes, gts) -> float | None:
    if not gts:
        return None
    return recall_at_iou(boxes, gts)


# ---------------------------------------------------------------------------
# stage training

def _pseudo_dump(scene, m_old, gt, bp_cfg, pack) -> dict:
    """Traced pseudo-label pipeline for the debug dump."""
    from .bridge_past import predict_old, select_pseudo_labels

    dets = predict_old(m_old, scene, pack)
    kept = select_pseudo_labels(dets, gt, bp_cfg)
    kept_keys = {(round(k.box.x_min, 9), round(k.box.y_min, 9), k.class_id) for k in kept}
    records = []
    for d in dets:
        p = float(d.probs.probs[:-1].max())
        if p <= bp_cfg.eta:
            continue  # below-threshold detections are uninteresting in bulk
        key = (round(d.box.x_min, 9), round(d.box.y_min, 9), d.probs.argmax_foreground())
        records.append(
            {
                "box": list(d.box.as_array()),
                "max_old_prob": p,
                "class": d.probs.argmax_foreground(),
                "kept": key in kept_keys,
            }
        )
    return {
        "scene_id": scene.scene_id,
        "detections_over_threshold": records,
        "kept": [
            {"box": list(k.box.as_array()), "class": k.class_id, "weight": k.loss_weight}
            for k in kept
        ],
    }


def _write_pgm(grid: np.ndarray, path: Path) -> None:
    lo, hi = float(grid.min()), float(grid.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.round((grid - lo) * scale).astype(int)
    lines = [f"{' '.join(str(v) for v in row)}" for row in pix]
    path.write_text(f"P2\n{grid.shape[1]} {grid.shape[0]}\n255\n" + "\n".join(lines) + "\n")


def run_stage(
    t: int,
    m_prev: DetectorModel | None,
    ds: StageDataset,
    test: StageDataset,
    cfg: ExperimentConfig,
    flags: MechanismFlags | None = None,
    out_dir: Path | None = None,
    dump_bp: bool = False,
    dump_bf: bool = False,
) -> tuple[DetectorModel, StageResult]:
    """Train stage t from m_prev (absent iff t == 0) on its dataset only."""
    registry = cfg.registry()
    method = cfg.method
    if flags is None:
        if method == "joint":
            raise ValueError("joint training is a single-shot baseline, not a stage method")
        flags = METHOD_FLAGS[method]
    if (t == 0) != (m_prev is None):
        raise ValueError("m_prev must be provided exactly when t > 0")

    stats: dict = {"cooccurrence": cooccurrence_stats(ds, registry)}
    current = registry.classes_at(t)

    if t == 0:
        model = train_supervised(ds, current, cfg.train, _child_seed(cfg.seed, 10, t), stage=0)
        return model, _finish_stage(model, t, test, cfg, stats, method)

    if tuple(m_prev.known_classes) != registry.classes_through(t - 1):
        raise ValueError("previous model registry does not match the configured split")

    train_cfg = cfg.train
    order = np.argsort([s.scene_id for s in ds.scenes], kind="stable")
    scenes = [ds.scenes[i] for i in order]
    visible = [ds.visible_annotations[i] for i in order]
    packs = _map_indexed(
        lambda s: pack_scene(s, train_cfg.window_sizes, train_cfg.window_stride), scenes
    )

    old_classes = registry.classes_before(t)
    future_classes = set(registry.classes_after(t))
    hidden_old = [
        (s.scene_id, b) for s in scenes for b, c in s.objects if c in set(old_classes)
    ]
    hidden_future = [(s.scene_id, b) for s in scenes for b, c in s.objects if c in future_classes]

    # --- bridge past: pseudo labels from the frozen previous model
    merged: list[list[WeightedAnnotation]] = []
    if flags.bridge_past:
        pseudo_total = 0
        pseudo_boxes = []
        bp_dir = out_dir / "dump_bp" if (dump_bp and out_dir) else None
        if bp_dir:
            bp_dir.mkdir(parents=True, exist_ok=True)
        for scene, vis, pack in zip(scenes, visible, packs):
            gt_w = gt_annotations(vis)
            pseudo = collect_pseudo_labels(m_prev, scene, gt_w, cfg.bp, pack)
            merged.append(merge_targets(gt_w, pseudo, current))
            pseudo_total += len(pseudo)
            pseudo_boxes += [(scene.scene_id, p.box) for p in pseudo]
            if bp_dir:
                doc = _pseudo_dump(scene, m_prev, gt_w, cfg.bp, pack)
                (bp_dir / f"scene_{scene.scene_id}.json").write_text(json.dumps(doc))
        stats["pseudo"] = {
            "count": pseudo_total,
            "per_scene": pseudo_total / max(1, len(scenes)),
            "recall_old": _safe_recall(pseudo_boxes, hidden_old),
        }
    else:
        merged = [gt_annotations(vis) for vis in visible]

    target_sets = [
        TargetSet(
            boxes=np.stack([m.box.as_array() for m in ml]) if ml else np.zeros((0, 4)),
            class_ids=np.array([m.class_id for m in ml], dtype=int),
            weights=np.array([m.loss_weight for m in ml]),
        )
        for ml in merged
    ]

    # --- bridge future: static attention scores and target-overlap masks
    attn_scores = []
    target_iou = []
    if flags.bridge_future:
        for scene, pack, tset in zip(scenes, packs, target_sets):
            amap = attention_map(scene.feature_grid, cfg.bf.p_exponent)
            attn_scores.append(region_attention_scores(amap, pack.cand))
            if tset.boxes.shape[0]:
                target_iou.append(iou_matrix(pack.cand, tset.boxes).max(axis=1))
            else:
                target_iou.append(np.zeros(pack.cand.shape[0]))

    # --- distillation teachers (frozen during the stage)
    caches = None
    m_im = None
    if flags.distillation == "dwf":
        m_im = train_supervised(ds, current, train_cfg, _child_seed(cfg.seed, 11, t), stage=t)
        caches = [
            build_dwf_cache(
                pack, m_prev, m_im, registry.classes_through(t), [b for b, _ in vis], cfg.distill
            )
            for pack, vis in zip(packs, visible)
        ]
    elif flags.distillation == "ukd":
        caches = [
            build_ukd_cache(pack, m_prev, registry.classes_through(t), cfg.distill)
            for pack in packs
        ]

    if flags.distillation != "none":
        pool_boxes = []
        for pack in packs:
            obj = objectness_scores(m_prev, pack.feats)
            pool = np.argsort(-obj, kind="stable")[: min(cfg.distill.n_top, pack.cand.shape[0])]
            pool_boxes += [(pack.scene.scene_id, BBox(*pack.cand[i])) for i in pool]
        visible_new = [(s.scene_id, b) for s, vis in zip(scenes, visible) for b, _ in vis]
        stats["distill_pool"] = {
            "recall_old": _safe_recall(pool_boxes, hidden_old),
            "recall_new": _safe_recall(pool_boxes, visible_new),
        }

    model = expand_model(m_prev, current)
    discard_counts: list[int] = []
    discard_recalls: list[float] = []
    bf_dir = out_dir / "dump_bf" if (dump_bf and out_dir and flags.bridge_future) else None
    if bf_dir:
        bf_dir.mkdir(parents=True, exist_ok=True)

    fut_by_scene: dict[int, np.ndarray] = {}
    for scene in scenes:
        boxes = [b.as_array() for b, c in scene.objects if c in future_classes]
        if boxes:
            fut_by_scene[scene.scene_id] = np.stack(boxes)

    for epoch in range(train_cfg.epochs):
        epoch_discards = 0
        epoch_hits = 0
        for i, (scene, pack, tset) in enumerate(zip(scenes, packs, target_sets)):
            sid = scene.scene_id
            discard_idx = None
            if flags.bridge_future:
                obj = objectness_scores(model, pack.feats)
                mask = discard_mask(attn_scores[i], obj, target_iou[i], cfg.bf)
                discard_idx = np.nonzero(mask)[0]
                epoch_discards += discard_idx.size
                fut = fut_by_scene.get(sid)
                if fut is not None and discard_idx.size:
                    hits = iou_matrix(fut, pack.cand[discard_idx]).max(axis=1) >= 0.5
                    epoch_hits += int(hits.sum())
                if bf_dir and epoch == 0:
                    amap = attention_map(scene.feature_grid, cfg.bf.p_exponent)
                    _write_pgm(amap.grid, bf_dir / f"scene_{sid}_attention.pgm")
                    doc = {
                        "scene_id": sid,
                        "discarded_boxes": [list(pack.cand[j]) for j in discard_idx],
                    }
                    (bf_dir / f"scene_{sid}_discard.json").write_text(json.dumps(doc))

            rng_s = _stream(cfg.seed, 12, t, epoch, sid)
            batch, info = make_roi_batch(model, pack, tset, train_cfg, rng_s, discard_idx)
            if discard_idx is not None and np.intersect1d(info.neg_idx, discard_idx).size:
                raise RuntimeError("negative sampling selected a discarded candidate")
            _, grads = loss_and_grads(model, batch, train_cfg.box_loss_weight)

            if flags.distillation == "dwf":
                _, dgrads = dwf_from_cache(caches[i], model, _stream(cfg.seed, 13, t, epoch, sid))
                grads.add_scaled(dgrads, cfg.distill.alpha)
            elif flags.distillation == "ukd":
                _, dgrads = ukd_from_cache(caches[i], model, _stream(cfg.seed, 13, t, epoch, sid))
                grads.add_scaled(dgrads, cfg.distill.alpha)

            model = sgd_step(model, grads, epoch_lr(train_cfg, epoch))
        if flags.bridge_future:
            discard_counts.append(epoch_discards)
            n_future = len(hidden_future)
            discard_recalls.append(epoch_hits / n_future if n_future else float("nan"))

    if flags.bridge_future:
        recalls = [r for r in discard_recalls if not np.isnan(r)]
        stats["discard"] = {
            "mean_count_per_scene": float(np.mean(discard_counts)) / max(1, len(scenes)),
            "recall_future": float(np.mean(recalls)) if recalls else None,
        }

    model = dataclasses.replace(model, trained_through_stage=t)
    return model, _finish_stage(model, t, test, cfg, stats, method)


def _finish_stage(model, t, test, cfg, stats, method) -> StageResult:
    report = evaluate_model(model, test, cfg.registry(), t, cfg)
    return StageResult(
        stage_index=t,
        method=method,
        checkpoint="",
        per_class_ap=report["per_class_ap"],
        old_map=report["old_map"],
        new_map=report["new_map"],
        all_map=report["all_map"],
        avg_map=report["avg_map"],
        stats=stats,
        notes=report["notes"],
    )


# ---------------------------------------------------------------------------
# full experiment

def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    flags: MechanismFlags | None = None,
    dump_bp: bool = False,
    dump_bf: bool = False,
) -> list[StageResult]:
    """Build datasets, run every stage, persist checkpoints and reports."""
    registry = cfg.registry()
    stages, test = build_stage_datasets(cfg.synth, registry, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_manifest(cfg, out)

    results: list[StageResult] = []
    if cfg.method == "joint" and flags is None:
        ds = joint_dataset(stages)
        last = registry.num_stages - 1
        model = train_supervised(
            ds, registry.all_classes, cfg.train, _child_seed(cfg.seed, 10, 0), stage=last
        )
        res = _finish_stage(model, last, test, cfg, {"cooccurrence": None}, "joint")
        results.append(res)
        if out is not None:
            res.checkpoint = f"checkpoints/stage_{last}.json"
            save_checkpoint(model, out / res.checkpoint, cfg.config_hash())
    else:
        model = None
        for t in range(registry.num_stages):
            model, res = run_stage(
                t, model, stages[t], test, cfg, flags, out_dir=out, dump_bp=dump_bp, dump_bf=dump_bf
            )
            if out is not None:
                res.checkpoint = f"checkpoints/stage_{t}.json"
                save_checkpoint(model, out / res.checkpoint, cfg.config_hash())
            results.append(res)

    if out is not None:
        write_report(results, cfg, out)
    return results


def _write_manifest(cfg: ExperimentConfig, out: Path) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "method": cfg.method,
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "bpfsim": __version__,
        },
        "config": cfg.canonical(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def write_report(results: list[StageResult], cfg: ExperimentConfig, out: Path) -> None:
    doc = {
        "config_hash": cfg.config_hash(),
        "method": cfg.method,
        "seed": cfg.seed,
        "split": list(cfg.split),
        "stages": [dataclasses.asdict(r) for r in results],
    }
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    lines = ["stage,method,class,ap"]
    for r in results:
        for cid in sorted(r.per_class_ap):
            ap = r.per_class_ap[cid]
            lines.append(f"{r.stage_index},{r.method},{cid},{'' if ap is None else repr(ap)}")
    summary = ["stage,method,old_map,new_map,all_map,avg_map"]
    fmt = lambda v: "" if v is None else repr(v)
    for r in results:
        summary.append(
            f"{r.stage_index},{r.method},{fmt(r.old_map)},{fmt(r.new_map)},{fmt(r.all_map)},{fmt(r.avg_map)}"
        )
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    (out / "summary.csv").write_text("\n".join(summary) + "\n")
