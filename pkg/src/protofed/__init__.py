"""protofed: deterministic federated-learning simulator with multi-prototype
knowledge distillation and classic baselines."""

from .federation import METHODS, FedConfig, init_federation, run_round
from .harness import ExperimentConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "METHODS",
    "FedConfig",
    "ExperimentConfig",
    "init_federation",
    "run_round",
    "run_experiment",
    "__version__",
]
