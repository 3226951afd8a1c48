"""Experiment orchestration: configuration, sweeps, aggregation, reports."""

from .config import ExperimentConfig, load_config, load_preset
from .runner import cmd_attack, cmd_evaluate, cmd_sweep_k, cmd_sweep_w, cmd_train
from .report import cmd_report

__all__ = [
    "ExperimentConfig",
    "cmd_attack",
    "cmd_evaluate",
    "cmd_report",
    "cmd_sweep_k",
    "cmd_sweep_w",
    "cmd_train",
    "load_config",
    "load_preset",
]
