"""The federated training loop and the per-round metrics it produces."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import datasets
from .algorithms import ClientState, ServerState, aggregate, client_update, local_update
from .config import ExperimentConfig
from .models import Batch, ObjectiveSpec, init_params, loss_and_grad, predict
from .numkit import derive_stream
from .sampling import (
    ParticipationStats,
    SamplerConfig,
    gate,
    ratios,
    record_participation,
    sample_cohort,
)

log = logging.getLogger(__name__)


@dataclass
class RoundRecord:
    round: int
    train_loss: float
    test_accuracy: float
    grad_norm_sq: float
    participated: list
    elapsed_ms: float


class FederatedTask:
    """Client objectives, shards and evaluation data for one experiment.

    ``specs[i]`` is client ``i``'s objective and ``shards[i]`` its data
    (``None`` for quadratics). The global objective is the unweighted client
    average.
    """

    def __init__(self, specs, shards, test=None, eval_set=None):
        self.specs = list(specs)
        self.shards = list(shards)
        self.test = test
        self.eval_set = eval_set

    @property
    def n_clients(self) -> int:
        return len(self.specs)

    @property
    def dim(self) -> int:
        return self.specs[0].dim

    @property
    def is_synthetic(self) -> bool:
        return self.eval_set is None

    def client_loss_grad(self, i: int, params):
        shard = self.shards[i]
        batch = None if shard is None else Batch(shard.inputs, shard.labels)
        return loss_and_grad(self.specs[i], params, batch)

    def client_grads(self, params, clients=None) -> np.ndarray:
        clients = range(self.n_clients) if clients is None else clients
        return np.stack([self.client_loss_grad(i, params)[1] for i in clients])

    def global_loss_grad(self, params):
        """Exact client-average objective, or its eval-subset estimate."""
        if self.eval_set is not None:
            batch = Batch(self.eval_set.inputs, self.eval_set.labels)
            return loss_and_grad(self.specs[0], params, batch)
        losses, grads = zip(*(self.client_loss_grad(i, params) for i in range(self.n_clients)))
        return float(np.mean(losses)), np.mean(np.stack(grads), axis=0)

    def accuracy(self, params) -> float:
        if self.test is None:
            return 0.0
        pred = predict(self.specs[0], params, self.test.inputs)
        return float(np.mean(pred == self.test.labels))


def build_task(cfg: ExperimentConfig) -> FederatedTask:
    t = cfg.task
    seed = cfg.seed
    if t.kind == "synthetic_quadratic":
        specs = datasets.synthetic_quadratic_task(
            cfg.n_clients, t.dim, t.heterogeneity, derive_stream(seed, "task"), l_max=t.l_max
        )
        return FederatedTask(specs, [None] * cfg.n_clients)

    if t.kind == "synthetic_logistic":
        full = datasets.synthetic_classification(
            t.n_samples, t.n_features, t.n_classes, derive_stream(seed, "task"),
            separation=t.separation, noise=t.noise,
        )
        test = full.subset(np.arange(t.n_test))
        train = full.subset(np.arange(t.n_test, t.n_samples))
        spec = ObjectiveSpec("logistic", layer_sizes=(t.n_features, t.n_classes))
        eval_set = None
    else:
        train, test = datasets.load_mnist(t.data_dir or None)
        spec = ObjectiveSpec("mlp", layer_sizes=(train.inputs.shape[1],) + tuple(t.hidden) + (train.class_count,))
        pick = derive_stream(seed, "grad-eval").choice(len(train), size=min(t.grad_eval_size, len(train)), replace=False)
        eval_set = train.subset(np.sort(pick))

    part_rng = derive_stream(seed, "partition")
    if t.partition == "iid":
        parts = datasets.iid_partition(train.labels, cfg.n_clients, part_rng)
    else:
        parts = datasets.dirichlet_partition(train.labels, cfg.n_clients, t.concentration, part_rng)
    shards = [train.subset(p) for p in parts]
    return FederatedTask([spec] * cfg.n_clients, shards, test=test, eval_set=eval_set)


class Simulation:
    """Stateful round-by-round runner; :meth:`run` drives it to completion."""

    def __init__(self, cfg: ExperimentConfig, task: Optional[FederatedTask] = None):
        self.cfg = cfg
        self.task = task or build_task(cfg)
        if self.task.n_clients != cfg.n_clients:
            raise ValueError("task client count does not match the config")
        self.sampler = SamplerConfig(cfg.n_clients, cfg.cohort_size)
        horizon = cfg.gate.horizon or cfg.expectation_horizon
        self.stats = ParticipationStats.fresh(cfg.n_clients, cfg.total_rounds, cfg.epsilon, horizon)
        omega0 = init_params(self.task.specs[0], derive_stream(cfg.seed, "init"))
        self.server = ServerState.initial(cfg.algorithm, omega0)
        self.clients = [ClientState.zeros(cfg.algorithm, self.task.dim) for _ in range(cfg.n_clients)]
        self.last_gates: dict = {}

    @property
    def round(self) -> int:
        return self.server.round

    def _client_round(self, i: int, gate_value: float, lr: float, round_no: int):
        cfg = self.cfg
        rng = derive_stream(cfg.seed, f"local-sgd/{round_no}", i)
        theta, dtheta, new = local_update(
            cfg.algorithm, self.task.specs[i], self.clients[i], self.server,
            self.task.shards[i], cfg.run, gate_value, rng,
            lr=lr, objective_weight=cfg.gate.objective_weight, beta=cfg.gate.beta, client_id=i,
        )
        return client_update(i, theta, dtheta, self.clients[i], new), new

    def step(self, cohort_stream=None, evaluate: Optional[bool] = None) -> Optional[RoundRecord]:
        cfg = self.cfg
        start = time.perf_counter()
        round_no = self.server.round + 1
        rng = cohort_stream or derive_stream(cfg.seed, "cohort", round_no)
        cohort = sample_cohort(self.sampler, round_no, rng)
        self.stats = record_participation(self.stats, cohort)
        r = ratios(self.stats, self.sampler)
        gates = {int(i): gate(cfg.gate, float(r[i])) for i in cohort}
        self.last_gates = gates
        lr = cfg.run.lr_at(round_no)

        jobs = [(int(i), gates[int(i)]) for i in cohort]
        if cfg.threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                results = list(pool.map(lambda job: self._client_round(job[0], job[1], lr, round_no), jobs))
        else:
            results = [self._client_round(i, g, lr, round_no) for i, g in jobs]

        updates = []
        for (i, _), (upd, new_state) in zip(jobs, results):
            new_state.count = int(self.stats.counts[i])
            self.clients[i] = new_state
            updates.append(upd)
        self.server = aggregate(cfg.algorithm, self.server, updates, len(cohort), cfg.n_clients)

        if evaluate is None:
            evaluate = round_no % cfg.eval_every == 0 or round_no == cfg.total_rounds
        if not evaluate:
            return None
        loss, grad = self.task.global_loss_grad(self.server.omega)
        return RoundRecord(
            round=round_no,
            train_loss=float(loss),
            test_accuracy=self.task.accuracy(self.server.omega),
            grad_norm_sq=float(grad @ grad),
            participated=[int(i) for i in cohort],
            elapsed_ms=(time.perf_counter() - start) * 1e3,
        )

    def run(self) -> list:
        records = []
        while self.server.round < self.cfg.total_rounds:
            rec = self.step()
            if rec is not None:
                records.append(rec)
                log.debug("round %d loss %.6g acc %.4f", rec.round, rec.train_loss, rec.test_accuracy)
        return records

    def fork(self) -> "Simulation":
        """Independent copy sharing the (read-only) task data."""
        clone = copy.copy(self)
        clone.server = copy.deepcopy(self.server)
        clone.clients = copy.deepcopy(self.clients)
        return clone


def run(cfg: ExperimentConfig, task: Optional[FederatedTask] = None) -> list:
    """Execute ``cfg.total_rounds`` rounds and return the evaluation records."""
    return Simulation(cfg, task).run()


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seed=seed)
