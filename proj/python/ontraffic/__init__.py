"""Probe-vehicle traffic-state estimation with an operator network."""

from ._core import (
    CheckpointError,
    ConfigError,
    Dataset,
    DatasetError,
    DivergenceError,
    Model,
    coverage,
    default_model_config,
    default_train_config,
    evaluate,
    expected_coverage,
    generate_dataset,
    load_dataset,
    tiny_model_config,
    train,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "Dataset",
    "DatasetError",
    "DivergenceError",
    "Model",
    "coverage",
    "default_model_config",
    "default_train_config",
    "evaluate",
    "expected_coverage",
    "generate_dataset",
    "load_dataset",
    "tiny_model_config",
    "train",
]
