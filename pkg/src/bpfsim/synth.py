"""Synthetic incremental-detection benchmark.

Scenes are H x W x C feature grids.  Each class owns a fixed random unit
prototype vector; an object adds signal * prototype to every cell whose
center falls inside its box, on top of isotropic Gaussian background
noise.  A stage dataset exposes labels only for that stage's classes,
while the scenes themselves carry objects from any stage; the held-out
test split is fully labeled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import BBox, box_cell_spans, iou

_PROTO_TAG = 101
_SCENE_TAG = 202
TEST_SPLIT = -1  # stage_index sentinel for the fully-labeled test split


@dataclass(frozen=True)
class SynthConfig:
    grid_h: int = 32
    grid_w: int = 32
    feat_dim: int = 16
    scenes_per_stage: int = 200
    test_scenes: int = 100
    objects_per_scene: tuple[int, int] = (2, 4)
    object_size: tuple[float, float] = (3.2, 4.5)
    signal: float = 3.0
    signal_jitter: float = 0.25  # per-instance strength factor in [1-j, 1+j]
    noise: float = 0.25
    cooccurrence_rate: float = 0.5
    max_overlap: float = 0.1
    max_tries: int = 50

    def __post_init__(self):
        if not 0.0 <= self.cooccurrence_rate <= 1.0:
            raise ValueError(f"cooccurrence_rate outside [0,1]: {self.cooccurrence_rate}")
        if self.grid_h <= 0 or self.grid_w <= 0 or self.feat_dim <= 0:
            raise ValueError("grid dimensions must be positive")


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered, disjoint class-id groups, one per stage; background is the
    implicit extra index after all class ids."""

    stage_sets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: set[int] = set()
        for s in self.stage_sets:
            if seen & set(s):
                raise ValueError("stage sets must be disjoint")
            seen |= set(s)

    @staticmethod
    def from_split(sizes) -> "ClassRegistry":
        """Contiguous id blocks, e.g. [5, 5] -> (0..4), (5..9)."""
        sets, start = [], 0
        for n in sizes:
            sets.append(tuple(range(start, start + n)))
            start += n
        return ClassRegistry(tuple(sets))

    @property
    def num_stages(self) -> int:
        return len(self.stage_sets)

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(c for s in self.stage_sets for c in s))

    @property
    def num_classes(self) -> int:
        return sum(len(s) for s in self.stage_sets)

    @property
    def background_id(self) -> int:
        return self.num_classes

    def classes_at(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(self.stage_sets[t]))

    def classes_through(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(c for s in self.stage_sets[: t + 1] for c in s))

    def classes_before(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(c for s in self.stage_sets[:t] for c in s))

    def classes_after(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(c for s in self.stage_sets[t + 1 :] for c in s))

    def stage_of(self, class_id: int) -> int:
        for t, s in enumerate(self.stage_sets):
            if class_id in s:
                return t
        raise KeyError(f"unknown class id {class_id}")


@dataclass
class Scene:
    feature_grid: np.ndarray  # (H, W, C)
    objects: list[tuple[BBox, int]]  # full hidden ground truth, all stages
    scene_id: int


@dataclass
class StageDataset:
    stage_index: int  # TEST_SPLIT for the fully-labeled test split
    scenes: list[Scene]
    visible_annotations: list[list[tuple[BBox, int]]]
    rng_seed: int
    registry: ClassRegistry = field(repr=False, default=None)


def class_prototypes(num_classes: int, feat_dim: int, seed: int) -> np.ndarray:
    """(K, C) fixed random unit vectors, one per class."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _PROTO_TAG]))
    vecs = rng.normal(size=(num_classes, feat_dim))
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def generate_scene(
    cfg: SynthConfig,
    prototypes: np.ndarray,
    rng: np.random.Generator,
    scene_id: int = 0,
    classes: list[int] | None = None,
) -> Scene:
    """Place one object per entry of `classes` (drawn uniformly over all
    prototype classes when None) into a noisy feature grid."""
    h, w, c = cfg.grid_h, cfg.grid_w, cfg.feat_dim
    if classes is None:
        n = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
        classes = [int(rng.integers(0, prototypes.shape[0])) for _ in range(n)]
    grid = rng.normal(0.0, cfg.noise, size=(h, w, c)) if cfg.noise > 0 else np.zeros((h, w, c))
    placed: list[tuple[BBox, int]] = []
    lo, hi = cfg.object_size
    for cid in classes:
        for _ in range(cfg.max_tries):
            bw = rng.uniform(lo, min(hi, w))
            bh = rng.uniform(lo, min(hi, h))
            x0 = rng.uniform(0.0, w - bw)
            y0 = rng.uniform(0.0, h - bh)
            box = BBox(x0, y0, x0 + bw, y0 + bh)
            if all(iou(box, b) <= cfg.max_overlap for b, _ in placed):
                placed.append((box, int(cid)))
                break
        else:
            raise ValueError("placement failure")
    if placed:
        j = cfg.signal_jitter
        factors = rng.uniform(1.0 - j, 1.0 + j, size=len(placed)) if j > 0 else np.ones(len(placed))
        arr = np.stack([b.as_array() for b, _ in placed])
        i0, i1, j0, j1 = box_cell_spans(arr, h, w)
        for k, (_, cid) in enumerate(placed):
            grid[i0[k] : i1[k], j0[k] : j1[k], :] += cfg.signal * factors[k] * prototypes[cid]
    return Scene(feature_grid=grid, objects=placed, scene_id=scene_id)


def _scene_rng(seed: int, split: int, scene_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SCENE_TAG, split, scene_id]))


def _stage_classes(cfg, registry, t, n, rng) -> list[int]:
    current = registry.classes_at(t)
    off = [c for c in registry.all_classes if c not in current]
    out: list[int] = []
    for k in range(n):
        if k > 0 and off and rng.random() < cfg.cooccurrence_rate:
            out.append(int(off[rng.integers(0, len(off))]))
        else:
            out.append(int(current[rng.integers(0, len(current))]))
    return out


def build_stage_datasets(
    cfg: SynthConfig, registry: ClassRegistry, seed: int
) -> tuple[list[StageDataset], StageDataset]:
    """Per-stage training splits (labels restricted to the stage's classes)
    plus a fully-labeled test split.

    Every training scene contains at least one current-class object (the
    first draw); the remaining objects come from off-stage classes with
    probability cooccurrence_rate.
    """
    if registry.num_classes == 0:
        raise ValueError("registry has no classes")
    protos = class_prototypes(registry.num_classes, cfg.feat_dim, seed)
    stages: list[StageDataset] = []
    next_id = 0
    for t in range(registry.num_stages):
        scenes, visible = [], []
        current = set(registry.classes_at(t))
        for _ in range(cfg.scenes_per_stage):
            rng = _scene_rng(seed, t, next_id)
            n = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
            classes = _stage_classes(cfg, registry, t, n, rng)
            scene = generate_scene(cfg, protos, rng, scene_id=next_id, classes=classes)
            scenes.append(scene)
            visible.append([(b, c) for b, c in scene.objects if c in current])
            next_id += 1
        stages.append(StageDataset(t, scenes, visible, seed, registry))
    test_scenes, test_visible = [], []
    for _ in range(cfg.test_scenes):
        rng = _scene_rng(seed, registry.num_stages, next_id)
        scene = generate_scene(cfg, protos, rng, scene_id=next_id)
        test_scenes.append(scene)
        test_visible.append(list(scene.objects))
        next_id += 1
    test = StageDataset(TEST_SPLIT, test_scenes, test_visible, seed, registry)
    return stages, test


def joint_dataset(stages: list[StageDataset]) -> StageDataset:
    """All training scenes with full labels (the joint-training baseline)."""
    scenes = [s for ds in stages for s in ds.scenes]
    visible = [list(s.objects) for s in scenes]
    registry = stages[0].registry
    return StageDataset(registry.num_stages - 1, scenes, visible, stages[0].rng_seed, registry)


def cooccurrence_stats(ds: StageDataset, registry: ClassRegistry) -> dict[str, float]:
    """Fractions of hidden object instances in past/current/future groups."""
    if ds.stage_index == TEST_SPLIT:
        raise ValueError("co-occurrence stats need a stage-indexed dataset")
    total = sum(len(s.objects) for s in ds.scenes)
    if total == 0:
        raise ValueError("empty dataset")
    t = ds.stage_index
    past = set(registry.classes_before(t))
    current = set(registry.classes_at(t))
    counts = {"past": 0, "current": 0, "future": 0}
    for scene in ds.scenes:
        for _, cid in scene.objects:
            if cid in past:
                counts["past"] += 1
            elif cid in current:
                counts["current"] += 1
            else:
                counts["future"] += 1
    return {k: v / total for k, v in counts.items()}


def save_dataset(ds: StageDataset, path: str | Path, config_hash: str = "") -> None:
    doc = {
        "config_hash": config_hash,
        "stage_index": ds.stage_index,
        "rng_seed": ds.rng_seed,
        "registry": [list(s) for s in ds.registry.stage_sets],
        "scenes": [
            {
                "scene_id": s.scene_id,
                "shape": list(s.feature_grid.shape),
                "grid": s.feature_grid.ravel().tolist(),  # row-major
                "objects": [[b.x_min, b.y_min, b.x_max, b.y_max, c] for b, c in s.objects],
                "visible": [[b.x_min, b.y_min, b.x_max, b.y_max, c] for b, c in vis],
            }
            for s, vis in zip(ds.scenes, ds.visible_annotations)
        ],
    }
    Path(path).write_text(json.dumps(doc))


def load_dataset(path: str | Path) -> tuple[StageDataset, str]:
    doc = json.loads(Path(path).read_text())
    registry = ClassRegistry(tuple(tuple(s) for s in doc["registry"]))
    scenes, visible = [], []
    for rec in doc["scenes"]:
        grid = np.array(rec["grid"], dtype=float).reshape(rec["shape"])
        objects = [(BBox(*o[:4]), int(o[4])) for o in rec["objects"]]
        scenes.append(Scene(grid, objects, int(rec["scene_id"])))
        visible.append([(BBox(*o[:4]), int(o[4])) for o in rec["visible"]])
    ds = StageDataset(int(doc["stage_index"]), scenes, visible, int(doc["rng_seed"]), registry)
    return ds, doc["config_hash"]
