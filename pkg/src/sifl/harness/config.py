"""Experiment configuration: TOML tables mapped onto frozen dataclasses.

TOML has no null, so optional integers use 0 for "unset" and optional
strings use "". Values are coerced to the declared field type on load, which
makes ``dumps(loads(text))`` a fixed point after one pass.
"""

from __future__ import annotations

import sys
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import tomli_w

from ..errors import InvalidConfigError
from ..federation import DistillSchedule, FederationConfig
from ..nn import PRESETS
from ..patchgen import AugmentationConfig
from ..pruning import EntropyPruneConfig, KMeansBalanceConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATASET_KINDS = ("synthetic", "png_dir")
SOURCE_KINDS = ("montage", "bundled", "image", "samples")


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "synthetic"
    classes: int = 4
    per_class: int = 150
    test_per_class: int = 100
    image_size: int = 16
    channels: int = 3
    separation: float = 0.32
    path: str = ""
    test_path: str = ""


@dataclass(frozen=True)
class PartitionSection:
    clients: int = 8
    alpha: float = 1.0
    architectures: list[str] = field(default_factory=lambda: ["small"])  # cycled over clients


@dataclass(frozen=True)
class SourceSection:
    kind: str = "montage"
    image: str = ""
    patches: int = 2000
    montage_grid: int = 12
    montage_tile: int = 32
    montage_blank: float = 0.6


@dataclass(frozen=True)
class AugmentSection:
    patch_size: int = 16
    crop_scale: list[float] = field(default_factory=lambda: [0.005, 0.02])
    crop_ratio: list[float] = field(default_factory=lambda: [0.75, 4 / 3])
    rotation_degrees: float = 35.0
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    crop: bool = True
    rotate: bool = True
    flip: bool = True
    jitter: bool = True


@dataclass(frozen=True)
class FederationSection:
    rounds: int = 30
    participation: float = 0.5
    fedavg_init_rate_percent: float = 20.0
    local_epochs: int = 10
    local_lr: float = 0.02
    local_batch_size: int = 32
    local_mode: str = "plain"
    mu: float = 0.0
    distill_lr: float = 0.01
    distill_batch_size: int = 32
    temperature: float = 1.0
    teacher_mode: str = "logits"
    momentum: float = 0.0
    score_mode: str = "softmax"
    pruning_group: str = ""
    selection_target: int = 0
    workers: int = 1
    checkpoint_every: int = 0  # 0: final models only


@dataclass(frozen=True)
class ScheduleSection:
    mode: str = "uniform"
    steps: int = 300
    decay: float = 0.9


@dataclass(frozen=True)
class KMeansSection:
    enabled: bool = True
    k: int = 32
    target_size: int = 0
    balance_factor: float = 1.0
    heuristic: str = "hard"
    refit: bool = True


@dataclass(frozen=True)
class EntropySection:
    enabled: bool = True
    removal_percent: float = 90.0
    heuristic: str = "top"


SECTIONS = {
    "dataset": DatasetSection,
    "partition": PartitionSection,
    "source": SourceSection,
    "augment": AugmentSection,
    "federation": FederationSection,
    "schedule": ScheduleSection,
    "kmeans": KMeansSection,
    "entropy": EntropySection,
}


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise InvalidConfigError(f"expected a list, got {value!r}", where)
        return [_coerce(v, inner, where) for v in value]
    if tp is bool:
        if not isinstance(value, bool):
            raise InvalidConfigError(f"expected true/false, got {value!r}", where)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidConfigError(f"expected an integer, got {value!r}", where)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfigError(f"expected a number, got {value!r}", where)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise InvalidConfigError(f"expected a string, got {value!r}", where)
        return value
    raise TypeError(tp)


def _build(cls, data: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise InvalidConfigError(f"unknown key {key!r}", f"{prefix}{key}")
    return cls(**{k: _coerce(v, hints[k], f"{prefix}{k}") for k, v in data.items()})


def _plain(obj) -> dict:
    return {f.name: (list(v) if isinstance(v := getattr(obj, f.name), list) else v) for f in fields(obj)}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "toy"
    output_dir: str = ""  # "" means <output root>/<name>
    seeds: list[int] = field(default_factory=lambda: [0])
    dataset: DatasetSection = DatasetSection()
    partition: PartitionSection = PartitionSection()
    source: SourceSection = SourceSection()
    augment: AugmentSection = AugmentSection()
    federation: FederationSection = FederationSection()
    schedule: ScheduleSection = ScheduleSection()
    kmeans: KMeansSection = KMeansSection()
    entropy: EntropySection = EntropySection()

    # --- (de)serialization ---

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        top = {}
        parts = {}
        for key, value in data.items():
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise InvalidConfigError("expected a table", key)
                parts[key] = _build(SECTIONS[key], value, f"{key}.")
            elif key in ("name", "output_dir", "seeds"):
                top[key] = value
            else:
                raise InvalidConfigError(f"unknown key {key!r}", key)
        hints = typing.get_type_hints(cls)
        top = {k: _coerce(v, hints[k], k) for k, v in top.items()}
        return cls(**top, **parts)

    def to_dict(self) -> dict:
        out = {"name": self.name, "output_dir": self.output_dir, "seeds": list(self.seeds)}
        for key in SECTIONS:
            out[key] = _plain(getattr(self, key))
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise InvalidConfigError(f"not valid TOML: {exc}", "config") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def with_overrides(self, assignments: list[str]) -> ExperimentConfig:
        """Apply ``section.key=value`` strings; values are parsed as TOML."""
        data = self.to_dict()
        for item in assignments:
            key, sep, raw = item.partition("=")
            if not sep:
                raise InvalidConfigError(f"override {item!r} is not key=value", "set")
            try:
                value = tomllib.loads(f"v = {raw.strip()}")["v"]
            except tomllib.TOMLDecodeError:
                value = raw.strip()  # bare words are taken as strings
            path = key.strip().split(".")
            node = data
            for part in path[:-1]:
                if not isinstance(node.get(part), dict):
                    raise InvalidConfigError(f"unknown section {part!r}", key.strip())
                node = node[part]
            if path[-1] not in node:
                raise InvalidConfigError(f"unknown key {path[-1]!r}", key.strip())
            node[path[-1]] = value
        return ExperimentConfig.from_dict(data)

    # --- validation and conversion to domain configs ---

    def augmentation(self) -> AugmentationConfig:
        with _prefixed("augment"):
            return AugmentationConfig.from_dict(_plain(self.augment))

    def federation_config(self, seed: int) -> FederationConfig:
        f, k, e, s = self.federation, self.kmeans, self.entropy, self.schedule
        with _prefixed("schedule"):
            schedule = DistillSchedule(s.mode, s.steps, s.decay, f.rounds)
        with _prefixed("kmeans"):
            kcfg = (
                KMeansBalanceConfig(k.k, k.target_size or None, k.balance_factor, k.heuristic, 0, k.refit)
                if k.enabled
                else None
            )
        with _prefixed("entropy"):
            ecfg = EntropyPruneConfig(e.removal_percent, e.heuristic) if e.enabled else None
        with _prefixed("federation"):
            return FederationConfig(
                rounds=f.rounds,
                participation=f.participation,
                fedavg_init_rate=f.fedavg_init_rate_percent,
                local_epochs=f.local_epochs,
                local_lr=f.local_lr,
                local_batch_size=f.local_batch_size,
                local_mode=f.local_mode,
                mu=f.mu,
                distill_lr=f.distill_lr,
                distill_batch_size=f.distill_batch_size,
                schedule=schedule,
                temperature=f.temperature,
                teacher_mode=f.teacher_mode,
                momentum=f.momentum,
                kmeans=kcfg,
                entropy=ecfg,
                selection_target=f.selection_target or None,
                score_mode=f.score_mode,
                pruning_group=f.pruning_group or None,
                source="labelled" if self.source.kind == "samples" else "patches",
                seed=seed,
                workers=f.workers,
            )

    def validate(self) -> ExperimentConfig:
        """Check every field and cross-field constraint; return ``self``."""
        d, p, src, f = self.dataset, self.partition, self.source, self.federation
        if not self.name:
            raise InvalidConfigError("name must be non-empty", "name")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds) or min(self.seeds) < 0:
            raise InvalidConfigError("seeds must be a non-empty list of distinct non-negative integers", "seeds")
        if d.kind not in DATASET_KINDS:
            raise InvalidConfigError(f"must be one of {DATASET_KINDS}", "dataset.kind")
        if d.kind == "synthetic":
            if d.classes < 2:
                raise InvalidConfigError("need at least two classes", "dataset.classes")
            if d.per_class < 1 or d.test_per_class < 1:
                raise InvalidConfigError("per-class counts must be positive", "dataset.per_class")
            if not 0 <= d.separation <= 1:
                raise InvalidConfigError("must be in [0, 1]", "dataset.separation")
            if d.channels not in (1, 3):
                raise InvalidConfigError("must be 1 or 3", "dataset.channels")
            if p.clients > d.classes * d.per_class:
                raise InvalidConfigError("more clients than training examples", "partition.clients")
        else:
            for key in ("path", "test_path"):
                if not getattr(d, key) or not Path(getattr(d, key)).is_dir():
                    raise InvalidConfigError("directory not found", f"dataset.{key}")
        if p.clients < 1:
            raise InvalidConfigError("need at least one client", "partition.clients")
        if not p.alpha > 0:
            raise InvalidConfigError("alpha must be positive", "partition.alpha")
        if not p.architectures:
            raise InvalidConfigError("list at least one preset", "partition.architectures")
        for name in p.architectures:
            if name not in PRESETS:
                raise InvalidConfigError(f"unknown preset {name!r}; choose from {PRESETS}", "partition.architectures")
        if src.kind not in SOURCE_KINDS:
            raise InvalidConfigError(f"must be one of {SOURCE_KINDS}", "source.kind")
        if src.patches < 1:
            raise InvalidConfigError("must be positive", "source.patches")
        if src.kind == "image" and not Path(src.image).is_file():
            raise InvalidConfigError("image file not found", "source.image")
        if src.kind == "montage" and d.kind != "synthetic":
            raise InvalidConfigError("montage sources need a synthetic dataset", "source.kind")
        if not 0 <= src.montage_blank < 1:
            raise InvalidConfigError("must be in [0, 1)", "source.montage_blank")
        if src.montage_grid < 1 or src.montage_tile < 1:
            raise InvalidConfigError("must be positive", "source.montage_grid")
        aug = self.augmentation()
        if d.kind == "synthetic" and aug.patch_size != d.image_size:
            raise InvalidConfigError(
                f"patch size {aug.patch_size} differs from model input size {d.image_size}", "augment.patch_size"
            )
        fed = self.federation_config(self.seeds[0])
        if fed.kmeans is not None and (fed.kmeans.target_size or 0) > src.patches:
            raise InvalidConfigError("exceeds the patch pool", "kmeans.target_size")
        if f.selection_target > src.patches:
            raise InvalidConfigError("exceeds the patch pool", "federation.selection_target")
        if f.pruning_group and f.pruning_group not in p.architectures:
            raise InvalidConfigError("not one of the client architectures", "federation.pruning_group")
        if f.workers < 1:
            raise InvalidConfigError("must be >= 1", "federation.workers")
        if f.checkpoint_every < 0:
            raise InvalidConfigError("must be >= 0", "federation.checkpoint_every")
        return self

    def client_architectures(self) -> list[str]:
        archs = self.partition.architectures
        return [archs[i % len(archs)] for i in range(self.partition.clients)]


class _prefixed:
    """Re-raise domain validation errors with a config-section prefix."""

    def __init__(self, section: str):
        self.section = section

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if isinstance(exc, InvalidConfigError) and exc.field and "." not in exc.field:
            raise InvalidConfigError(str(exc).split(": ", 1)[-1], f"{self.section}.{exc.field}") from exc
        return False


def default_config(**sections) -> ExperimentConfig:
    """The toy configuration, with optional per-section field overrides."""
    cfg = ExperimentConfig()
    for key, values in sections.items():
        if key in SECTIONS:
            cfg = replace(cfg, **{key: replace(getattr(cfg, key), **values)})
        else:
            cfg = replace(cfg, **{key: values})
    return cfg
