"""Experiment configuration: TOML loading, validation, canonical hashing.

The config file is the single source of truth for a run; command-line
flags may only override the seed and paths.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .bridge_future import BFConfig
from .bridge_past import BPConfig
from .detector import TrainConfig
from .distill import DistillConfig
from .synth import ClassRegistry, SynthConfig

METHODS = ("finetune", "joint", "ukd", "bpf", "bpf_no_bp", "bpf_no_bf", "bpf_no_dwf")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    score_thresh: float = 0.25
    nms_iou: float = 0.3
    interp: str = "all"  # or "eleven"

    def __post_init__(self):
        if self.interp not in ("all", "eleven"):
            raise ConfigError(f"unknown eval.interp: {self.interp}")


@dataclass(frozen=True)
class ExperimentConfig:
    split: tuple[int, ...] = (5, 5)
    method: str = "bpf"
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    bp: BPConfig = field(default_factory=BPConfig)
    bf: BFConfig = field(default_factory=BFConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method: {self.method}")
        if not self.split or any(n <= 0 for n in self.split):
            raise ConfigError(f"split sizes must be positive: {self.split}")

    def registry(self) -> ClassRegistry:
        return ClassRegistry.from_split(self.split)

    def canonical(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        doc = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def _parse_split(raw, num_classes: int | None) -> tuple[int, ...]:
    """Accept [5, 5] lists or "A-B" strings (B repeats to num_classes)."""
    if isinstance(raw, (list, tuple)):
        return tuple(int(n) for n in raw)
    if isinstance(raw, str):
        parts = raw.split("-")
        try:
            a, b = (int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"split string must be 'A-B': {raw!r}") from None
        if num_classes is None:
            raise ConfigError("string split needs synth.num_classes to expand")
        if a >= num_classes:
            raise ConfigError(f"split {raw!r} leaves no classes for later stages")
        sizes = [a]
        while sum(sizes) < num_classes:
            sizes.append(min(b, num_classes - sum(sizes)))
        return tuple(sizes)
    raise ConfigError(f"unsupported split value: {raw!r}")


def _build(cls, section: dict, name: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {name}.{key}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad [{name}] section: {e}") from e


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    synth_sec = dict(doc.pop("synth", {}))
    num_classes = synth_sec.pop("num_classes", None)
    split = _parse_split(doc.pop("split", [5, 5]), num_classes)
    if num_classes is not None and sum(split) != num_classes:
        raise ConfigError(f"split {split} does not sum to num_classes={num_classes}")
    kwargs = {
        "split": split,
        "method": doc.pop("method", "bpf"),
        "seed": int(doc.pop("seed", 0)),
        "synth": _build(SynthConfig, synth_sec, "synth"),
        "bp": _build(BPConfig, dict(doc.pop("bp", {})), "bp"),
        "bf": _build(BFConfig, dict(doc.pop("bf", {})), "bf"),
        "distill": _build(DistillConfig, dict(doc.pop("distill", {})), "distill"),
        "train": _build(TrainConfig, dict(doc.pop("train", {})), "train"),
        "eval": _build(EvalConfig, dict(doc.pop("eval", {})), "eval"),
    }
    if doc:
        raise ConfigError(f"unknown top-level keys: {sorted(doc)}")
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        doc = tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e
    return config_from_dict(doc)
