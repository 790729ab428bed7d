"""Declarative experiment configuration (YAML)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adversary import AttackSpec
from .aggregation import SCAFFOLD_MODES, MaskConfig

STRATEGIES = ("nwfedavg", "fedavg", "fedprox", "fednova", "scaffold", "masked")


class ConfigError(ValueError):
    """A config field is missing, unknown or out of range; message starts with the field."""


@dataclass
class BlobsConfig:
    num_classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    dim: int = 64
    spread: float = 0.5
    seed: int = 0
    image_shape: tuple[int, int] | None = (8, 8)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ValueError("per_class and test_per_class must be >= 1")
        if self.spread < 0:
            raise ValueError("spread must be >= 0")
        if self.image_shape is not None:
            self.image_shape = tuple(self.image_shape)
            if len(self.image_shape) != 2 or self.image_shape[0] * self.image_shape[1] != self.dim:
                raise ValueError(f"image_shape {self.image_shape} does not cover dim {self.dim}")


@dataclass
class IDXConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int | None = None


@dataclass
class DatasetConfig:
    blobs: BlobsConfig | None = None
    idx: IDXConfig | None = None

    def __post_init__(self):
        if (self.blobs is None) == (self.idx is None):
            raise ValueError("exactly one of 'blobs' or 'idx' must be given")


@dataclass
class TrainSection:
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mu: float = 0.01

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.mu < 0:
            raise ValueError("weight_decay and mu must be >= 0")


@dataclass
class ExperimentConfig:
    strategy: str = "masked"
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(blobs=BlobsConfig()))
    n_clients: int = 10
    alpha: float = 0.5
    rounds: int = 100
    hidden: int = 64
    train: TrainSection = field(default_factory=TrainSection)
    mask: MaskConfig = field(default_factory=MaskConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    scaffold_mode: str = "standard"
    master_seed: int = 0
    validation_cap: int = 32
    workers: int = 1
    record_timing: bool = True
    output: str | None = None
    format: str = "csv"
    label: str | None = None

    def __post_init__(self):
        if not self.strategy:
            raise ConfigError("strategy: must be set")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown {self.strategy!r}, expected one of {STRATEGIES}")
        if self.n_clients < 1:
            raise ConfigError("n_clients: must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha: must be > 0")
        if self.rounds < 0:
            raise ConfigError("rounds: must be >= 0")
        if self.hidden < 1:
            raise ConfigError("hidden: must be >= 1")
        if self.scaffold_mode not in SCAFFOLD_MODES:
            raise ConfigError(f"scaffold_mode: expected one of {SCAFFOLD_MODES}")
        if self.validation_cap < 1:
            raise ConfigError("validation_cap: must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.format not in ("csv", "json"):
            raise ConfigError("format: expected csv or json")
        if self.attack.kind == "dba" and self.dataset.blobs is not None \
                and self.dataset.blobs.image_shape is None:
            raise ConfigError("attack.kind: dba needs dataset.blobs.image_shape")

    @property
    def name(self) -> str:
        return self.label or self.strategy

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with changes; dotted keys ("train.lr") reach into sections."""
        data = config_to_dict(self)
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                if node.get(p) is None:
                    node[p] = {}
                node = node[p]
            node[leaf] = value
        return config_from_dict(data)


_SECTIONS = {
    "train": TrainSection,
    "mask": MaskConfig,
    "attack": AttackSpec,
}


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown field")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _build_dataset(data) -> DatasetConfig:
    if data is None:
        return DatasetConfig(blobs=BlobsConfig())
    if not isinstance(data, dict):
        raise ConfigError("dataset: expected a mapping")
    for key in data:
        if key not in ("blobs", "idx"):
            raise ConfigError(f"dataset.{key}: unknown field")
    blobs = _build(BlobsConfig, data["blobs"], "dataset.blobs") if "blobs" in data else None
    idx = _build(IDXConfig, data["idx"], "dataset.idx") if data.get("idx") is not None else None
    try:
        return DatasetConfig(blobs, idx)
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from None


def config_from_dict(data: dict | None) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for key, value in data.items():
        if key == "dataset":
            kwargs[key] = _build_dataset(value)
        elif key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in kwargs:
        if key not in known:
            raise ConfigError(f"{key}: unknown field")
    if "strategy" in data and not data["strategy"]:
        raise ConfigError("strategy: must be set")
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    data = _plain(dataclasses.asdict(cfg))
    data["dataset"] = {k: v for k, v in data["dataset"].items() if v is not None}
    return data


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def load_config(source: str | Path) -> ExperimentConfig:
    """Parse a YAML config from a file path or from the document text itself."""
    if isinstance(source, Path) or ("\n" not in str(source) and Path(str(source)).is_file()):
        text = Path(source).read_text()
    else:
        text = str(source)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"document: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("document: top level must be a mapping")
    return config_from_dict(data)
