"""Cohort sampling and the participation-ratio gate.

The gate turns a client's observed selection count into a scalar weight:
``r = count / (expected + eps)`` followed by a monotone map ``phi(r)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numkit import RngStream

GATE_MODES = ("identity", "identity_clipped", "logistic", "identity_full_horizon", "constant")
HORIZONS = ("current_round", "total_rounds")


@dataclass(frozen=True)
class SamplerConfig:
    n_clients: int
    cohort_size: int
    scheme: str = "uniform_without_replacement"

    def __post_init__(self) -> None:
        if not 1 <= self.cohort_size <= self.n_clients:
            raise ValueError(f"cohort_size must be in [1, n_clients={self.n_clients}]")
        if self.scheme != "uniform_without_replacement":
            raise ValueError(f"unsupported sampling scheme {self.scheme!r}")

    @property
    def inclusion_probability(self) -> float:
        return self.cohort_size / self.n_clients


@dataclass(frozen=True)
class GateConfig:
    mode: str = "identity"
    alpha: float = 0.05
    beta: float = 0.0
    logistic_center: float = 1.0
    logistic_scale: float = 0.25
    alpha_max: float = 1.0
    # only read in "constant" mode (pins the gate, e.g. to 0 for reductions)
    constant: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.mode!r}")
        if not 0 < self.alpha <= self.alpha_max:
            raise ValueError(f"alpha must be in (0, alpha_max={self.alpha_max}]")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.logistic_scale <= 0:
            raise ValueError("logistic_scale must be positive")
        if self.constant < 0:
            raise ValueError("constant gate must be nonnegative")

    @property
    def objective_weight(self) -> float:
        """Multiplier on the gate inside the local objective.

        The logistic gate already carries alpha as its ceiling; the
        identity-style gates do not, so alpha scales the alignment term.
        """
        return 1.0 if self.mode == "logistic" else self.alpha

    @property
    def horizon(self) -> str | None:
        """Horizon forced by the mode, or None to keep the configured one."""
        return "total_rounds" if self.mode == "identity_full_horizon" else None


@dataclass(frozen=True)
class ParticipationStats:
    counts: np.ndarray
    round: int = 0
    total_rounds: int = 1
    epsilon: float = 1e-6
    expectation_horizon: str = "current_round"

    def __post_init__(self) -> None:
        if self.expectation_horizon not in HORIZONS:
            raise ValueError(f"unknown expectation horizon {self.expectation_horizon!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def fresh(cls, n_clients: int, total_rounds: int, epsilon: float = 1e-6,
              expectation_horizon: str = "current_round") -> "ParticipationStats":
        return cls(np.zeros(n_clients, dtype=np.int64), 0, total_rounds, epsilon, expectation_horizon)


def sample_cohort(cfg: SamplerConfig, round: int, rng: RngStream) -> np.ndarray:
    """``cohort_size`` distinct client ids, sorted.

    ``round`` is accepted for call-site symmetry; callers pass a stream that
    is already specific to the round.
    """
    if cfg.cohort_size == cfg.n_clients:
        return np.arange(cfg.n_clients)
    return np.sort(rng.choice(cfg.n_clients, size=cfg.cohort_size, replace=False))


def expected_count(stats: ParticipationStats, cfg: SamplerConfig, client: int | None = None) -> float:
    horizon = stats.total_rounds if stats.expectation_horizon == "total_rounds" else stats.round
    return cfg.inclusion_probability * horizon


def ratio(stats: ParticipationStats, cfg: SamplerConfig, client: int) -> float:
    return float(stats.counts[client]) / (expected_count(stats, cfg, client) + stats.epsilon)


def ratios(stats: ParticipationStats, cfg: SamplerConfig) -> np.ndarray:
    """Vectorised :func:`ratio` over all clients."""
    return stats.counts / (expected_count(stats, cfg) + stats.epsilon)


def gate(cfg: GateConfig, r: float) -> float:
    if r < 0:
        raise ValueError("ratio must be nonnegative")
    if cfg.mode in ("identity", "identity_full_horizon"):
        return float(r)
    if cfg.mode == "constant":
        return float(cfg.constant)
    if cfg.mode == "identity_clipped":
        return float(min(r, 1.0))
    z = (r - cfg.logistic_center) / cfg.logistic_scale
    # split branches keep exp() from overflowing for large |z|
    if z >= 0:
        return cfg.alpha / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return cfg.alpha * ez / (1.0 + ez)


def record_participation(stats: ParticipationStats, cohort) -> ParticipationStats:
    counts = stats.counts.copy()
    counts[np.asarray(list(cohort), dtype=np.int64)] += 1
    return replace(stats, counts=counts, round=stats.round + 1)
