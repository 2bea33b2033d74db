"""
Pipeline configuration, read from YAML.

Schema (every section optional; defaults shown)::

    seed: 0
    output_dir: runs/default
    dataset:
      kind: synthetic            # synthetic | cifar10-binary | idx-images
      seed: 0                    # synthetic only
      n_train: 3000              # synthetic only
      n_test: 600                # synthetic only
      noise: 1.0                 # synthetic only
      train_paths: []            # cifar10-binary
      test_paths: []             # cifar10-binary
      train_images: null         # idx-images (plus train_labels, test_images, test_labels)
      mean: null                 # per-channel normalization; CIFAR-10 constants for cifar10-binary
      std: null
      augment: null              # default: on for cifar10-binary, off otherwise
    architecture:
      preset: toy-cnn            # toy-cnn | vgg16-cifar | resnet18-cifar | resnet56-cifar
    decompose:
      d: 5
      d_per_layer: {}            # site key ("L3", "S0") -> d
      center: false
    pretrain:  {<train fields>}
    retrain:   {<train fields>}
    finetune:  {<train fields>}
    prune:
      s: 1.0
      std_nonzero_only: false
    shrink:
      fold_bias: false
    bench:
      batch_size: 8
      repetitions: 20

Train fields: gamma, base_lr, schedule, momentum, weight_decay, batch_size,
epochs, alternation_interval, start_group. The run seed overrides any
per-block seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import CIFAR10_MEAN, CIFAR10_STD, Dataset, load_cifar10, load_idx, synthetic
from .presets import PRESETS
from .train import TrainConfig

DATASET_KINDS = ("synthetic", "cifar10-binary", "idx-images")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    seed: int = 0
    n_train: int = 3000
    n_test: int = 600
    noise: float = 1.0
    train_paths: List[str] = field(default_factory=list)
    test_paths: List[str] = field(default_factory=list)
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    mean: Optional[List[float]] = None
    std: Optional[List[float]] = None
    augment: Optional[bool] = None

    def validate(self, base: Path) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "synthetic":
            if self.n_train < 1 or self.n_test < 1:
                raise ConfigError("dataset.n_train and dataset.n_test must be >= 1")
            if self.noise < 0:
                raise ConfigError("dataset.noise must be >= 0")
        elif self.kind == "cifar10-binary":
            if not self.train_paths or not self.test_paths:
                raise ConfigError("cifar10-binary needs dataset.train_paths and dataset.test_paths")
            for p in self.train_paths + self.test_paths:
                _must_exist(base, p)
        else:
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, name) is None:
                    raise ConfigError(f"idx-images needs dataset.{name}")
                _must_exist(base, getattr(self, name))
        if self.std is not None and any(s <= 0 for s in self.std):
            raise ConfigError("dataset.std entries must be > 0")

    def load(self, base: Path = Path(".")) -> Dataset:
        resolve = lambda p: str(base / p)  # noqa: E731
        if self.kind == "synthetic":
            return synthetic(self.seed, self.n_train, self.n_test, noise=self.noise)
        if self.kind == "cifar10-binary":
            return load_cifar10(
                [resolve(p) for p in self.train_paths], [resolve(p) for p in self.test_paths],
                self.mean or CIFAR10_MEAN, self.std or CIFAR10_STD,
                augment=True if self.augment is None else self.augment,
            )
        return load_idx(
            resolve(self.train_images), resolve(self.train_labels),
            resolve(self.test_images), resolve(self.test_labels),
            self.mean, self.std, augment=bool(self.augment),
        )


def _must_exist(base: Path, p: str) -> None:
    if not (base / p).exists():
        raise ConfigError(f"path does not exist: {p}")


@dataclass
class DecomposeSpec:
    d: int = 5
    d_per_layer: Dict[str, int] = field(default_factory=dict)
    center: bool = False


@dataclass
class PruneSpec:
    s: float = 1.0
    std_nonzero_only: bool = False


@dataclass
class ShrinkSpec:
    fold_bias: bool = False


@dataclass
class BenchSpec:
    batch_size: int = 8
    repetitions: int = 20


@dataclass
class PipelineConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    preset: str = "toy-cnn"
    decompose: DecomposeSpec = field(default_factory=DecomposeSpec)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    retrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneSpec = field(default_factory=PruneSpec)
    shrink: ShrinkSpec = field(default_factory=ShrinkSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    base_dir: str = "."

    def train_config(self, phase: str) -> TrainConfig:
        cfg = getattr(self, phase)
        return TrainConfig(**{**asdict(cfg), "seed": self.seed})

    def with_seed(self, seed: int) -> "PipelineConfig":
        out = PipelineConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        out.seed = seed
        return out

    def echo(self) -> dict:
        """Config as plain data, without machine-specific paths."""
        out = asdict(self)
        out.pop("base_dir")
        out.pop("output_dir")
        for block in ("pretrain", "retrain", "finetune"):
            out[block].pop("seed")
        return out


def _section(cls, raw: Any, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(raw: Optional[dict], base_dir: Path = Path(".")) -> PipelineConfig:
    raw = dict(raw or {})
    top = {"seed", "output_dir", "dataset", "architecture", "decompose", "pretrain", "retrain",
           "finetune", "prune", "shrink", "bench"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    arch = raw.get("architecture") or {}
    preset = arch.get("preset", "toy-cnn") if isinstance(arch, dict) else None
    if preset not in PRESETS:
        raise ConfigError(f"architecture.preset must be one of {sorted(PRESETS)}, got {preset!r}")
    train_blocks = {}
    for phase in ("pretrain", "retrain", "finetune"):
        block = dict(raw.get(phase) or {})
        block.pop("seed", None)
        train_blocks[phase] = _section(TrainConfig, block, phase)
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = PipelineConfig(
        seed=seed,
        output_dir=str(raw.get("output_dir", "runs/default")),
        dataset=_section(DatasetSpec, raw.get("dataset"), "dataset"),
        preset=preset,
        decompose=_section(DecomposeSpec, raw.get("decompose"), "decompose"),
        prune=_section(PruneSpec, raw.get("prune"), "prune"),
        shrink=_section(ShrinkSpec, raw.get("shrink"), "shrink"),
        bench=_section(BenchSpec, raw.get("bench"), "bench"),
        base_dir=str(base_dir),
        **train_blocks,
    )
    cfg.dataset.validate(base_dir)
    if cfg.decompose.d < 1:
        raise ConfigError("decompose.d must be >= 1")
    if any((not isinstance(v, int)) or v < 1 for v in cfg.decompose.d_per_layer.values()):
        raise ConfigError("decompose.d_per_layer values must be integers >= 1")
    if cfg.prune.s < 0:
        raise ConfigError("prune.s must be >= 0")
    if cfg.bench.repetitions < 5 or cfg.bench.batch_size < 1:
        raise ConfigError("bench.repetitions must be >= 5 and bench.batch_size >= 1")
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return parse_config(raw, path.parent)
