"""Experiment configuration types."""

from __future__ import annotations

from dataclasses import dataclass, field

from .algorithms import AlgorithmConfig, LocalRunConfig
from .sampling import HORIZONS, GateConfig

TASK_KINDS = ("synthetic_logistic", "synthetic_quadratic", "mnist")
PARTITIONS = ("dirichlet", "iid")


class ConfigError(ValueError):
    """Invalid configuration. ``key`` names the offending setting."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "synthetic_logistic"
    partition: str = "dirichlet"
    concentration: float = 0.3
    # synthetic quadratic
    dim: int = 10
    heterogeneity: float = 1.0
    l_max: float = 2.0
    # synthetic logistic
    n_samples: int = 6000
    n_test: int = 1000
    n_features: int = 20
    n_classes: int = 10
    separation: float = 3.0
    noise: float = 1.0
    # mnist
    hidden: tuple = (200, 200)
    data_dir: str = ""
    grad_eval_size: int = 2048

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError("task.kind", f"must be one of {TASK_KINDS}")
        if self.partition not in PARTITIONS:
            raise ConfigError("task.partition", f"must be one of {PARTITIONS}")
        if not self.concentration > 0:
            raise ConfigError("task.concentration", "must be positive")
        if self.dim < 1:
            raise ConfigError("task.dim", "must be at least 1")
        if self.heterogeneity < 0:
            raise ConfigError("task.heterogeneity", "must be nonnegative")
        if self.n_test < 1 or self.n_samples <= self.n_test:
            raise ConfigError("task.n_samples", "must exceed n_test (>= 1)")
        if self.n_classes < 2:
            raise ConfigError("task.n_classes", "must be at least 2")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    n_clients: int = 10
    cohort_size: int = 4
    total_rounds: int = 20
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    run: LocalRunConfig = field(default_factory=LocalRunConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    epsilon: float = 1e-6
    expectation_horizon: str = "current_round"
    seed: int = 0
    eval_every: int = 1
    threads: int = 1
    target_accuracy: float = 0.97

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ConfigError("sampler.n_clients", "must be at least 1")
        if not 1 <= self.cohort_size <= self.n_clients:
            raise ConfigError("sampler.cohort_size", f"must be in [1, n_clients={self.n_clients}]")
        if self.total_rounds < 1:
            raise ConfigError("experiment.total_rounds", "must be at least 1")
        if self.eval_every < 1:
            raise ConfigError("experiment.eval_every", "must be at least 1")
        if self.threads < 1:
            raise ConfigError("experiment.threads", "must be at least 1")
        if not self.epsilon > 0:
            raise ConfigError("sampler.epsilon", "must be positive")
        if self.expectation_horizon not in HORIZONS:
            raise ConfigError("sampler.expectation_horizon", f"must be one of {HORIZONS}")
        if not 0 < self.target_accuracy < 1:
            raise ConfigError("experiment.target_accuracy", "must be in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("experiment.seed", "must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class ComparisonSpec:
    base: ExperimentConfig
    algorithms: tuple
    overrides: dict
    target_accuracy: float
    seeds: tuple

    def __post_init__(self) -> None:
        if not self.algorithms:
            raise ConfigError("comparison.algorithms", "needs at least one algorithm")
        if not 0 < self.target_accuracy < 1:
            raise ConfigError("comparison.target_accuracy", "must be in (0, 1)")
        if not self.seeds:
            raise ConfigError("comparison.seeds", "needs at least one seed")
