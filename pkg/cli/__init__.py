"""Experiment configuration and command-line entry points."""

from .commands import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, cmd_eval, cmd_plot, cmd_run, execute
from .config import ExperimentConfig, apply_overrides, load_config, parse_config
from .main import build_parser, main

__all__ = [
    "EXIT_CHECKPOINT",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "EXIT_OK",
    "cmd_eval",
    "cmd_plot",
    "cmd_run",
    "execute",
    "ExperimentConfig",
    "apply_overrides",
    "load_config",
    "parse_config",
    "build_parser",
    "main",
]
