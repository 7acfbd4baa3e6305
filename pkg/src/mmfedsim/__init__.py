"""Desk-scale federated multi-modal learning simulator."""

__version__ = "0.1.0"

from .backend import active_backend, set_backend
from .datagen import DatasetSpec, MultiModalRecord
from .harness import ExperimentConfig, parse_config, run_experiment

__all__ = [
    "DatasetSpec",
    "ExperimentConfig",
    "MultiModalRecord",
    "active_backend",
    "parse_config",
    "run_experiment",
    "set_backend",
    "__version__",
]
