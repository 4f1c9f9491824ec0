"""Post-hoc quantities computed from runs: rounds-to-target, speedup,
gradient dissimilarity and empirical descent."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numkit import derive_stream


class DegeneratePointError(ValueError):
    """The global gradient is too small for a dissimilarity ratio."""


class UnsupportedTaskError(ValueError):
    pass


def rounds_to_target(records, target_acc: float) -> Optional[int]:
    """First round whose test accuracy reaches ``target_acc``; None if never."""
    if not records:
        raise ValueError("records must be nonempty")
    for rec in records:
        if rec.test_accuracy >= target_acc:
            return rec.round
    return None


def speedup(baseline_rounds: Optional[int], method_rounds: Optional[int], T: int) -> float:
    """Rounds ratio against a baseline.

    A run that never reached the target counts as ``T`` rounds, on either
    side; :func:`format_rounds` renders it as ``">T"``.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    base = T if baseline_rounds is None else baseline_rounds
    method = T if method_rounds is None else method_rounds
    return base / method


def format_rounds(rounds: Optional[int], T: int) -> str:
    return f">{T}" if rounds is None else str(rounds)


def format_speedup(value: float) -> str:
    return f"{value:.2f}×"


def last_k_accuracy(records, k: int = 50):
    """Mean and population std of the final ``k`` evaluated accuracies."""
    acc = np.array([r.test_accuracy for r in records[-k:]], dtype=np.float64)
    return float(acc.mean()), float(acc.std())


@dataclass
class DissimilarityEstimate:
    b_value: float
    at_round: int
    grad_norm_sq: float
    sigma_sq: float

    @property
    def variance_bound(self) -> float:
        """``sqrt(1 + sigma^2 / ||grad f||^2)``, the bounded-variance ceiling on B."""
        return float(np.sqrt(1.0 + self.sigma_sq / self.grad_norm_sq))


def estimate_dissimilarity(task, omega, sample=None, at_round: int = 0, eps_div: float = 1e-12):
    """Plug-in B(omega) over ``sample`` (default: every client).

    Uses full-shard client gradients; the global gradient is their mean over
    the sample.
    """
    clients = list(range(task.n_clients)) if sample is None else list(sample)
    grads = task.client_grads(omega, clients)
    mean_grad = grads.mean(axis=0)
    denom = float(mean_grad @ mean_grad)
    if denom <= eps_div:
        raise DegeneratePointError(f"||grad f||^2 = {denom:.3g} <= {eps_div:.3g}")
    second_moment = float(np.mean(np.einsum("ij,ij->i", grads, grads)))
    dev = grads - mean_grad
    sigma_sq = float(np.mean(np.einsum("ij,ij->i", dev, dev)))
    return DissimilarityEstimate(float(np.sqrt(second_moment / denom)), at_round, denom, sigma_sq)


@dataclass
class DescentReport:
    decrease_fraction: float
    loglog_slope: float
    moving_average: np.ndarray
    p_hat: Optional[np.ndarray] = None
    grad_sum: float = 0.0
    notes: list = field(default_factory=list)


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loglog_slope(rounds, grad_norm_sq, floor: float = 1e-300) -> float:
    """Least-squares slope of log(min-so-far ||grad||^2) against log(t)."""
    g = np.minimum.accumulate(np.maximum(np.asarray(grad_norm_sq, dtype=np.float64), floor))
    x = np.log(np.asarray(rounds, dtype=np.float64))
    y = np.log(g)
    return float(np.polyfit(x, y, 1)[0])


def descent_check(records, window: int = 10, rtol: float = 1e-12,
                  simulation=None, resample_rounds=(), resamples: int = 8) -> DescentReport:
    """Empirical descent diagnostics for a synthetic-task run.

    ``decrease_fraction`` counts steps where the window-``window`` moving
    average of the training loss did not go up. Differences below
    ``rtol * max(1, |f|)`` are floating-point ties and count as
    non-increasing.

    If ``simulation`` (a fresh :class:`~fedssg.orchestrator.Simulation` for
    the same config) is given, ``p_hat`` is estimated at each round in
    ``resample_rounds`` as ``2 (f_t - E f_{t+1}) / ||grad f_t||^2`` with the
    expectation taken over ``resamples`` independently drawn cohorts.
    """
    if simulation is not None and not simulation.task.is_synthetic:
        raise UnsupportedTaskError("descent_check needs a synthetic task with an exact objective")
    if not records:
        raise ValueError("records must be nonempty")
    f = np.array([r.train_loss for r in records])
    ma = moving_average(f, window)
    steps = np.diff(ma)
    tol = rtol * np.maximum(1.0, np.abs(ma[:-1]))
    frac = float(np.mean(steps <= tol)) if steps.size else 1.0
    slope = loglog_slope([r.round for r in records], [r.grad_norm_sq for r in records])
    report = DescentReport(frac, slope, ma, grad_sum=float(sum(r.grad_norm_sq for r in records)))
    if simulation is not None and resample_rounds:
        report.p_hat = _estimate_p_hat(simulation, sorted(resample_rounds), resamples)
    return report


def _estimate_p_hat(sim, rounds, resamples: int) -> np.ndarray:
    seed = sim.cfg.seed
    out = []
    for target in rounds:
        while sim.round < target - 1:
            sim.step(evaluate=False)
        f_t, g_t = sim.task.global_loss_grad(sim.server.omega)
        nxt = []
        for k in range(resamples):
            branch = sim.fork()
            branch.step(cohort_stream=derive_stream(seed, f"cohort-resample/{target}", k), evaluate=False)
            nxt.append(sim.task.global_loss_grad(branch.server.omega)[0])
        out.append(2.0 * (f_t - float(np.mean(nxt))) / float(g_t @ g_t))
    return np.array(out)
