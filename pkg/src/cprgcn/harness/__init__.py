"""Experiment harness: configuration, data preparation, metrics, training and the CLI."""

from .config import ConfigError, DataConfig, ExperimentConfig, TrainConfig, load_config
from .metrics import MetricsReport, compute_metrics, merge_reports
from .train import (
    ABLATIONS,
    FoldSplit,
    cross_validate,
    five_fold_split,
    run_ablation_grid,
    run_data_attack,
    train_model,
)

__all__ = [
    "ABLATIONS", "ConfigError", "DataConfig", "ExperimentConfig", "FoldSplit", "MetricsReport",
    "TrainConfig", "compute_metrics", "cross_validate", "five_fold_split", "load_config",
    "merge_reports", "run_ablation_grid", "run_data_attack", "train_model",
]
