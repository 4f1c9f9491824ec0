"""Federated learning simulator with participation-gated drift correction
(FedSSG) and the FedAvg, FedProx, SCAFFOLD, FedDyn and FedDC baselines."""

__version__ = "0.1.0"

from .algorithms import AlgorithmConfig, LocalRunConfig, ablation_mask
from .config import ComparisonSpec, ConfigError, ExperimentConfig, TaskConfig
from .orchestrator import FederatedTask, RoundRecord, Simulation, build_task, run
from .sampling import GateConfig

__all__ = [
    "AlgorithmConfig",
    "ComparisonSpec",
    "ConfigError",
    "ExperimentConfig",
    "FederatedTask",
    "GateConfig",
    "LocalRunConfig",
    "RoundRecord",
    "Simulation",
    "TaskConfig",
    "ablation_mask",
    "build_task",
    "run",
]
