"""Experiment configuration: one YAML document covering cohort, data, model and training."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..cohort import CohortSpec
from ..model import ModelConfig

SELECTION_MODES = ("test_precision", "val_precision", "last")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    target_spacing: float = 0.5
    resample_spacing: float = 10.0
    merge_radius: float = 3.0
    samples_per_span: int = 4


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 0.001
    selection: str = "test_precision"
    val_fraction: float = 0.2
    loss_reduction: str = "tree"

    def __post_init__(self):
        if self.selection not in SELECTION_MODES:
            raise ConfigError(f"selection must be one of {SELECTION_MODES}, got {self.selection!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs and batch_size must be >= 1 and lr > 0")


@dataclass
class ExperimentConfig:
    cohort: CohortSpec = field(default_factory=CohortSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    n_folds: int = 5
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return {
            "cohort": self.cohort.to_dict(),
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "seed": self.seed,
            "n_folds": self.n_folds,
            "output_dir": self.output_dir,
        }

    def replace_model(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, model=dataclasses.replace(self.model, **changes))


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict | None) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = set(doc) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    return ExperimentConfig(
        cohort=_build(CohortSpec, doc.get("cohort"), "cohort"),
        data=_build(DataConfig, doc.get("data"), "data"),
        model=_build(ModelConfig, doc.get("model"), "model"),
        train=_build(TrainConfig, doc.get("train"), "train"),
        seed=int(doc.get("seed", 0)),
        n_folds=int(doc.get("n_folds", 5)),
        output_dir=str(doc.get("output_dir", "runs")),
    )


def load_config(path: str | Path | None = None, seed: int | None = None) -> ExperimentConfig:
    """Read a YAML config; ``CPRGCN_SEED`` / ``CPRGCN_OUTPUT_DIR`` and ``seed`` override it.

    The explicit ``seed`` argument wins over the environment.
    """
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(doc)
    if "CPRGCN_SEED" in os.environ:
        cfg.seed = int(os.environ["CPRGCN_SEED"])
    if "CPRGCN_OUTPUT_DIR" in os.environ:
        cfg.output_dir = os.environ["CPRGCN_OUTPUT_DIR"]
    if seed is not None:
        cfg.seed = int(seed)
    return cfg


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
