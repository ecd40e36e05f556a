"""Experiment harness: configs, checkpoints, reports and the command line."""

from .checkpoint import Checkpoint, CheckpointError, load, load_into, save
from .config import ConfigError, ExperimentConfig, load_config, parse_config, preset_names
from .report import EvalReport, matrix_text
from .runner import (
    load_data,
    run_attack,
    run_eval,
    run_experiment,
    run_sweep,
    run_train,
    run_transfer,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "load",
    "load_into",
    "save",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "preset_names",
    "EvalReport",
    "matrix_text",
    "load_data",
    "run_attack",
    "run_eval",
    "run_experiment",
    "run_sweep",
    "run_train",
    "run_transfer",
]
