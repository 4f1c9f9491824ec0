"""Client updates and server aggregation for the six federated methods.

Every method goes through the same two calls: :func:`local_update` on each
sampled client, then :func:`aggregate` on the server. Method-specific state
lives in ``ClientState.aux`` and the optional fields of ``ServerState``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .models import Batch, CorrectionTerms, ObjectiveSpec, composite_grad, loss_and_grad
from .numkit import RngStream

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "feddyn", "feddc", "fedssg")
ABLATION_COMPONENTS = ("penalization", "grad_correction", "memo_xi")
DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, round: int, client: Optional[int], detail: str = ""):
        where = f"round {round}" + (f", client {client}" if client is not None else "")
        super().__init__(f"training diverged at {where}" + (f": {detail}" if detail else ""))
        self.round = round
        self.client = client


@dataclass(frozen=True)
class AlgorithmConfig:
    name: str = "fedssg"
    # FedProx
    mu: float = 1e-4
    # FedDyn
    alpha_dyn: float = 0.01
    # FedDC
    alpha_dc: float = 0.1
    # FedSSG
    alignment_form: str = "inner_product"
    penalization: bool = True
    grad_correction: bool = True
    memo_xi: bool = True
    memory: bool = True
    correction_scale: str = "steps"
    domega: str = "mean_local_delta"
    aggregation_norm: str = "cohort"

    def __post_init__(self) -> None:
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}")
        if self.alignment_form not in ("inner_product", "proximal"):
            raise ValueError(f"unknown alignment_form {self.alignment_form!r}")
        if self.correction_scale not in ("steps", "epochs"):
            raise ValueError("correction_scale must be 'steps' or 'epochs'")
        if self.domega not in ("mean_local_delta", "global_delta"):
            raise ValueError("domega must be 'mean_local_delta' or 'global_delta'")
        if self.aggregation_norm not in ("cohort", "n_clients"):
            raise ValueError("aggregation_norm must be 'cohort' or 'n_clients'")
        if min(self.mu, self.alpha_dyn, self.alpha_dc) < 0:
            raise ValueError("regularisation weights must be nonnegative")
        if self.alpha_dyn == 0 and self.name == "feddyn":
            raise ValueError("feddyn needs alpha_dyn > 0")


@dataclass(frozen=True)
class LocalRunConfig:
    epochs: int = 5
    batch_size: int = 50
    lr: float = 0.1
    lr_decay_per_round: float = 0.998
    weight_decay: float = 1e-3

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_per_round <= 1:
            raise ValueError("lr_decay_per_round must be in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def lr_at(self, round: int) -> float:
        """Learning rate for 1-based communication round ``round``."""
        return self.lr * self.lr_decay_per_round ** (round - 1)


@dataclass
class ClientState:
    h: np.ndarray
    count: int = 0
    dtheta_prev: Optional[np.ndarray] = None
    aux: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, algo: AlgorithmConfig, dim: int) -> "ClientState":
        aux = {}
        if algo.name in ("scaffold", "feddc"):
            aux["c"] = np.zeros(dim)
        if algo.name == "feddyn":
            aux["grad_state"] = np.zeros(dim)
        return cls(h=np.zeros(dim), aux=aux)

    def vectors(self) -> list:
        vecs = [self.h] + list(self.aux.values())
        if self.dtheta_prev is not None:
            vecs.append(self.dtheta_prev)
        return vecs


@dataclass
class ServerState:
    omega: np.ndarray
    round: int = 0
    domega_prev: Optional[np.ndarray] = None
    scaffold_c: Optional[np.ndarray] = None
    feddyn_h: Optional[np.ndarray] = None
    drift_mean: Optional[np.ndarray] = None

    @classmethod
    def initial(cls, algo: AlgorithmConfig, omega0: np.ndarray) -> "ServerState":
        d = omega0.shape[0]
        return cls(
            omega=np.array(omega0, dtype=np.float64),
            domega_prev=np.zeros(d),
            scaffold_c=np.zeros(d) if algo.name in ("scaffold", "feddc") else None,
            feddyn_h=np.zeros(d) if algo.name == "feddyn" else None,
            drift_mean=np.zeros(d) if algo.name == "feddc" else None,
        )


@dataclass
class ClientUpdate:
    """What one client sends back after a round."""

    client: int
    theta: np.ndarray
    dtheta: np.ndarray
    h: np.ndarray
    h_increment: np.ndarray
    c_delta: Optional[np.ndarray] = None


def ablation_mask(components, base: AlgorithmConfig | None = None) -> AlgorithmConfig:
    """FedSSG variant with the named components switched off.

    Turning off ``memo_xi`` makes the memory accumulate raw local deltas
    (weight 1 instead of the gate). With all three components off the
    memory has no role left and is dropped, which leaves plain FedAvg.
    """
    disabled = set(components)
    unknown = disabled - set(ABLATION_COMPONENTS)
    if unknown:
        raise ValueError(f"unknown ablation component(s): {sorted(unknown)}")
    base = base or AlgorithmConfig()
    return replace(
        base,
        name="fedssg",
        penalization="penalization" not in disabled,
        grad_correction="grad_correction" not in disabled,
        memo_xi="memo_xi" not in disabled,
        memory=disabled != set(ABLATION_COMPONENTS),
    )


def _batches(n: int, batch_size: int, rng: RngStream):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def steps_per_round(n_samples: Optional[int], run_cfg: LocalRunConfig) -> int:
    if n_samples is None:
        return run_cfg.epochs
    return run_cfg.epochs * math.ceil(n_samples / run_cfg.batch_size)


def local_update(
    algo: AlgorithmConfig,
    spec: ObjectiveSpec,
    client_state: ClientState,
    server_state: ServerState,
    data_shard,
    run_cfg: LocalRunConfig,
    gate_value: float,
    rng: RngStream,
    *,
    lr: Optional[float] = None,
    objective_weight: float = 1.0,
    beta: float = 0.0,
    client_id: Optional[int] = None,
):
    """Run ``run_cfg.epochs`` epochs of minibatch SGD from the global model.

    ``data_shard`` is a :class:`~fedssg.datasets.LabeledDataset` for the
    dense families, or ``None`` for quadratics (one full-gradient step per
    epoch). Returns ``(theta, dtheta, new_client_state)``; the input state is
    not modified.
    """
    omega = server_state.omega
    round_no = server_state.round + 1
    lr = run_cfg.lr_at(round_no) if lr is None else lr
    n_samples = None if data_shard is None else len(data_shard)
    n_steps = steps_per_round(n_samples, run_cfg)
    wd = run_cfg.weight_decay

    corr = None
    if algo.name == "fedssg":
        d = omega.shape[0]
        has_prev = client_state.dtheta_prev is not None
        corr = CorrectionTerms(
            alpha=objective_weight,
            gate=gate_value,
            h_prev=client_state.h,
            omega_prev=omega,
            dtheta_prev=client_state.dtheta_prev if has_prev else np.zeros(d),
            domega_prev=server_state.domega_prev if server_state.domega_prev is not None else np.zeros(d),
            eta=lr,
            epochs=n_steps if algo.correction_scale == "steps" else run_cfg.epochs,
            alignment_form=algo.alignment_form,
            grad_correction_enabled=algo.grad_correction and has_prev,
            penalty_enabled=algo.penalization,
        )
    if algo.name in ("scaffold", "feddc"):
        control = server_state.scaffold_c - client_state.aux["c"]
    if algo.name == "feddc":
        anchor_dc = omega - client_state.h

    def gradient(theta, batch):
        if corr is not None:
            g = composite_grad(spec, theta, batch, corr)
        else:
            g = loss_and_grad(spec, theta, batch)[1]
        if wd:
            g = g + wd * theta
        if algo.name == "fedprox":
            g = g + algo.mu * (theta - omega)
        elif algo.name == "scaffold":
            g = g + control
        elif algo.name == "feddyn":
            g = g - client_state.aux["grad_state"] + algo.alpha_dyn * (theta - omega)
        elif algo.name == "feddc":
            g = g + algo.alpha_dc * (theta - anchor_dc) + control
        return g

    theta = omega.copy()
    for _ in range(run_cfg.epochs):
        if data_shard is None:
            theta = theta - lr * gradient(theta, None)
        else:
            for idx in _batches(n_samples, run_cfg.batch_size, rng):
                batch = Batch(data_shard.inputs[idx], data_shard.labels[idx])
                theta = theta - lr * gradient(theta, batch)
        if not np.all(np.isfinite(theta)) or np.abs(theta).max() > DIVERGENCE_LIMIT:
            raise DivergenceError(round_no, client_id, "local parameters exceeded limit")

    dtheta = theta - omega
    new = ClientState(
        h=client_state.h,
        count=client_state.count,
        dtheta_prev=client_state.dtheta_prev,
        aux=dict(client_state.aux),
    )
    if algo.name == "fedssg":
        if algo.memory:
            weight = (gate_value if algo.memo_xi else 1.0) + beta
            if weight != 0.0:
                new.h = client_state.h + weight * dtheta
        new.dtheta_prev = dtheta
    elif algo.name == "feddyn":
        new.aux["grad_state"] = client_state.aux["grad_state"] - algo.alpha_dyn * dtheta
    elif algo.name in ("scaffold", "feddc"):
        new.aux["c"] = client_state.aux["c"] - server_state.scaffold_c - dtheta / (n_steps * lr)
        if algo.name == "feddc":
            new.h = client_state.h + dtheta
    return theta, dtheta, new


def client_update(client: int, theta, dtheta, old: ClientState, new: ClientState) -> ClientUpdate:
    """Package a finished local run for :func:`aggregate`."""
    c_delta = new.aux["c"] - old.aux["c"] if "c" in new.aux else None
    return ClientUpdate(client, theta, dtheta, new.h, new.h - old.h, c_delta)


def aggregate(
    algo: AlgorithmConfig,
    server_state: ServerState,
    contributions,
    cohort_size: int,
    n_clients: Optional[int] = None,
) -> ServerState:
    """New server state from the cohort's :class:`ClientUpdate` list."""
    if not contributions:
        raise ValueError("aggregate needs at least one contribution")
    d = server_state.omega.shape[0]
    if any(u.theta.shape != (d,) for u in contributions):
        raise ValueError("contribution length does not match the global model")
    n_clients = n_clients or cohort_size
    thetas = np.stack([u.theta for u in contributions])
    mean_dtheta = np.stack([u.dtheta for u in contributions]).mean(axis=0)
    new = replace(server_state, round=server_state.round + 1)

    if algo.name == "fedssg":
        rows = np.stack([u.theta + u.h if u.h.any() else u.theta for u in contributions])
        if algo.aggregation_norm == "cohort":
            omega = rows.mean(axis=0)
        else:
            omega = rows.sum(axis=0) / n_clients
    else:
        omega = thetas.mean(axis=0)

    if algo.name in ("scaffold", "feddc"):
        c_sum = np.stack([u.c_delta for u in contributions]).sum(axis=0)
        new.scaffold_c = server_state.scaffold_c + c_sum / n_clients
    if algo.name == "feddyn":
        new.feddyn_h = server_state.feddyn_h - algo.alpha_dyn * (thetas - server_state.omega).sum(axis=0) / n_clients
        omega = omega - new.feddyn_h / algo.alpha_dyn
    if algo.name == "feddc":
        inc = np.stack([u.h_increment for u in contributions]).sum(axis=0)
        new.drift_mean = server_state.drift_mean + inc / n_clients
        omega = omega + new.drift_mean

    if not np.all(np.isfinite(omega)) or np.abs(omega).max() > DIVERGENCE_LIMIT:
        raise DivergenceError(new.round, None, "global parameters exceeded limit")
    if algo.domega == "global_delta":
        new.domega_prev = omega - server_state.omega
    else:
        new.domega_prev = mean_dtheta
    new.omega = omega
    return new
