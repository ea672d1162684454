"""Federated training: local updates, server aggregation and the round loop.

Four strategies share one client loop. ``scaffold`` adds the drift
correction ``c_g - c_l`` to every backbone step and returns a control
variate delta; ``fedprox`` adds a proximal pull towards the round's global
weights; ``fednova`` normalizes deltas by local step counts when
aggregating. Any strategy can run with per-client pruning gates, which
train locally and never leave the client.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from feddp import dpgate
from feddp.data import LabeledDataset, Partition
from feddp.errors import ConfigError, NumericError
from feddp.metrics import CommLedger, RoundMetrics
from feddp.nn import backward, cosine_lr, forward, init_params, predict, sgd_step, total_loss
from feddp.nn.params import ParamSet
from feddp.nn.spec import ModelSpec

STRATEGIES = ("fedavg", "fedprox", "fednova", "scaffold")
SCHEDULES = ("cosine", "constant")
DENOMINATORS = ("epochs", "total_steps")

# stream tags for np.random.default_rng([seed, tag, ...])
_INIT, _SAMPLING, _GATES, _BATCHES = 0, 1, 2, 3


@dataclass(frozen=True)
class FLConfig:
    strategy: str = "scaffold"
    dynamic_pruning: bool = True
    rounds: int = 50
    local_epochs: int = 2
    lr: float = 0.1
    batch_size: int = 64
    weight_decay: float = 5e-4
    sample_rate: float = 1.0
    mu: float = 0.01
    seed: int = 0
    lr_schedule: str = "cosine"
    control_denominator: str = "epochs"
    keep_ratio: float | dict | None = None
    lasso: float = dpgate.DEFAULT_LASSO
    # pin c_g = c_l = 0 (scaffold reduces to fedavg); for ablations and tests
    freeze_variates: bool = False
    threads: int = 1

    def __post_init__(self):
        problems = []
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy: {self.strategy!r} not in {STRATEGIES}")
        if not 0 < self.sample_rate <= 1:
            problems.append(f"sample_rate: {self.sample_rate} outside (0, 1]")
        if self.local_epochs < 1:
            problems.append("local_epochs: must be >= 1")
        if self.rounds < 0:
            problems.append("rounds: must be >= 0")
        if not self.lr > 0:
            problems.append("lr: must be > 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.weight_decay < 0 or self.mu < 0 or self.lasso < 0:
            problems.append("weight_decay, mu and lasso must be >= 0")
        if self.lr_schedule not in SCHEDULES:
            problems.append(f"lr_schedule: {self.lr_schedule!r} not in {SCHEDULES}")
        if self.control_denominator not in DENOMINATORS:
            problems.append(f"control_denominator: {self.control_denominator!r} "
                            f"not in {DENOMINATORS}")
        if self.threads < 1:
            problems.append("threads: must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def uses_variates(self) -> bool:
        return self.strategy == "scaffold"

    def epoch_lr(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return cosine_lr(epoch, self.local_epochs, self.lr)

    def sampled_count(self, num_clients: int) -> int:
        # rounding first keeps e.g. 0.7 * 10 from becoming 8
        return max(1, math.ceil(round(self.sample_rate * num_clients, 9)))


@dataclass
class ServerState:
    w: ParamSet
    c_g: ParamSet
    num_clients: int
    round: int = 0

    def __post_init__(self):
        self.w.check_structure(self.c_g, "global control variate")


@dataclass
class ClientState:
    id: int
    train: LabeledDataset
    val: LabeledDataset | None
    c_l: ParamSet
    gates: dpgate.GateState | None = None
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.train)

    def rng(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, _BATCHES, self.id, round_index])


@dataclass
class ClientReturn:
    client_id: int
    w_k: ParamSet
    delta_w: ParamSet
    c_delta: ParamSet
    n_k: int
    steps: int
    mean_loss: float


# -- strategy pieces --------------------------------------------------------

def fedprox_correction(w: ParamSet, w_t: ParamSet, mu: float) -> ParamSet:
    """Gradient addend ``mu * (w - w_t)`` of the proximal term."""
    return w.zip_map(w_t, lambda a, b: mu * (a - b))


def _weighted_sum(deltas: list[ParamSet], weights) -> ParamSet:
    # fixed left-to-right reduction order
    total = deltas[0].scale(weights[0])
    for d, p in zip(deltas[1:], weights[1:]):
        total = total + d.scale(p)
    return total


def fednova_aggregate(deltas: list[ParamSet], taus, weights) -> ParamSet:
    """``tau_eff * sum_k p_k * delta_k / tau_k`` with ``tau_eff = sum_k p_k * tau_k``.

    Only trainable entries are normalized; running statistics are plainly
    averaged since they do not accumulate over steps.
    """
    if any(t < 1 for t in taus):
        raise ValueError("every local step count must be >= 1")
    tau_eff = float(sum(p * t for p, t in zip(weights, taus)))
    normalized = [d.scale(1.0 / t) for d, t in zip(deltas, taus)]
    update = _weighted_sum(normalized, weights).scale(tau_eff)
    plain = _weighted_sum(deltas, weights)
    for name, p in update:
        if not p.trainable:
            p.value = plain[name].value
    return update


def aggregate(w_t: ParamSet, returns: list[ClientReturn], strategy: str) -> ParamSet:
    """New global weights from the sampled clients' returns (ascending id)."""
    returns = sorted(returns, key=lambda r: r.client_id)
    n = sum(r.n_k for r in returns)
    weights = [r.n_k / n for r in returns]
    lone = [r for r in returns if r.n_k == n]
    if lone:
        # every other client holds zero weight; the adopted weights equal
        # w_t + delta exactly, without re-rounding through the delta
        return lone[0].w_k.copy()
    deltas = [r.delta_w for r in returns]
    if strategy == "fednova":
        update = fednova_aggregate(deltas, [r.steps for r in returns], weights)
    else:
        update = _weighted_sum(deltas, weights)
    return w_t + update


def update_global_variate(c_g: ParamSet, c_deltas: list[ParamSet], num_clients: int) -> ParamSet:
    """``c_g + (1/N) * sum_k c_delta_k`` with N the total client count."""
    total = c_deltas[0].copy()
    for d in c_deltas[1:]:
        total = total + d
    return c_g + total.map(lambda a: a / num_clients)


# -- client -----------------------------------------------------------------

Objective = Callable[[ParamSet, "dpgate.GateState | None", np.ndarray, np.ndarray, float], float]


def network_objective(model: ModelSpec) -> Objective:
    """Loss of ``model`` on one batch; fills backbone and gate gradients."""
    def objective(w, gates, x, y, lasso):
        logits, tape = forward(model, w, x, gates, train=True, check=False)
        loss = total_loss(logits, y, tape, lasso if gates is not None else None)
        backward(tape)
        return float(loss.value)
    return objective


def client_update(client: ClientState, w_t: ParamSet, c_g: ParamSet, cfg: FLConfig,
                  model: ModelSpec | Objective, round_index: int = 0) -> ClientReturn:
    """Run ``cfg.local_epochs`` of local SGD from ``w_t``; updates ``client``'s
    control variate and gates in place.

    ``model`` is a network description or any callable
    ``(w, gates, x, y, lasso) -> loss`` that leaves gradients in ``w``.
    """
    objective = network_objective(model) if isinstance(model, ModelSpec) else model
    n_k = client.n
    if n_k == 0:
        raise ConfigError(f"client {client.id} has an empty training shard")
    w_t.check_structure(c_g, "global control variate")
    w_t.check_structure(client.c_l, f"client {client.id} control variate")

    w = w_t.copy()
    gates = client.gates if cfg.dynamic_pruning else None
    variates = cfg.uses_variates and not cfg.freeze_variates
    correction = None
    if variates:
        correction = c_g - client.c_l
        if correction.is_zero():
            correction = None
    rng = client.rng(round_index)
    x, y = client.train.images, client.train.labels

    # summed steps give w_t - w_k without the cancellation of subtracting
    travel = w_t.zeros_like() if variates else None
    steps, lr_sum, loss_sum = 0, 0.0, 0.0
    for epoch in range(cfg.local_epochs):
        lr = cfg.epoch_lr(epoch)
        order = rng.permutation(n_k)
        for start in range(0, n_k, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            w.zero_grad()
            if gates is not None:
                gates.params.zero_grad()
            where = f"round {round_index + 1}, client {client.id}, batch {steps + 1}"
            try:
                loss = objective(w, gates, x[idx], y[idx], cfg.lasso)
            except NumericError as exc:
                raise NumericError(f"{where}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericError(f"{where}: non-finite loss")
            extra = fedprox_correction(w, w_t, cfg.mu) if cfg.strategy == "fedprox" else None
            sgd_step(w, lr, cfg.weight_decay, correction, extra, travel)
            if gates is not None:
                sgd_step(gates.params, lr)
            steps += 1
            lr_sum += lr
            loss_sum += loss

    delta = w - w_t
    if variates:
        denom = cfg.local_epochs * cfg.lr if cfg.control_denominator == "epochs" else lr_sum
        # c_l* - c_l with c_l* = c_l - c_g + (w_t - w_k) / denom
        c_delta = travel.map(lambda a: a / denom) - c_g
        _zero_frozen(c_delta)
        client.c_l = client.c_l + c_delta
    else:
        c_delta = w_t.zeros_like()
    return ClientReturn(client.id, w, delta, c_delta, n_k, steps, loss_sum / steps)


def _zero_frozen(ps: ParamSet) -> None:
    # running statistics are not optimized, so they carry no drift
    for _, p in ps:
        if not p.trainable:
            p.value = np.zeros_like(p.value)


# -- evaluation -------------------------------------------------------------

@dataclass
class Evaluation:
    top1: float
    flops_per_sample: float
    sparsity: float
    count: int


def evaluate(model: ModelSpec, w: ParamSet, gates, dataset: LabeledDataset,
             batch_size: int = 256) -> Evaluation:
    """Top-1 accuracy with ``gates`` (or the full model) plus measured cost."""
    if dataset is None or len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    logits, flops, sparsity = predict(model, w, dataset.images, gates, batch_size)
    acc = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    return Evaluation(acc, float(flops.mean()), float(sparsity.mean()), len(dataset))


# -- simulation -------------------------------------------------------------

@dataclass
class Federation:
    """Server, clients and the communication ledger of one run."""
    model: ModelSpec
    cfg: FLConfig
    server: ServerState
    clients: list[ClientState]
    test: LabeledDataset | None
    ledger: CommLedger = field(default_factory=CommLedger)
    sampling_rng: np.random.Generator | None = None
    history: list[RoundMetrics] = field(default_factory=list)

    @classmethod
    def build(cls, model: ModelSpec, train: LabeledDataset, partition: Partition,
              cfg: FLConfig, test: LabeledDataset | None = None) -> Federation:
        w0 = init_params(model, np.random.default_rng([cfg.seed, _INIT]))
        clients = []
        for k in range(partition.num_clients):
            if partition.train[k].size == 0:
                raise ConfigError(f"client {k} has an empty training shard")
            gates = None
            if cfg.dynamic_pruning:
                gates = dpgate.build_gates(model, np.random.default_rng([cfg.seed, _GATES, k]),
                                           cfg.keep_ratio, cfg.lasso)
            val = train.subset(partition.val[k]) if partition.val[k].size else None
            clients.append(ClientState(k, train.subset(partition.train[k]), val,
                                       w0.zeros_like(), gates, cfg.seed))
        server = ServerState(w0, w0.zeros_like(), len(clients))
        return cls(model, cfg, server, clients, test,
                   sampling_rng=np.random.default_rng([cfg.seed, _SAMPLING]))

    def sample_clients(self) -> list[int]:
        n = self.server.num_clients
        m = self.cfg.sampled_count(n)
        if m < 1:
            raise ConfigError("no client sampled")
        return sorted(int(k) for k in self.sampling_rng.choice(n, size=m, replace=False))

    def round(self) -> RoundMetrics:
        cfg, server = self.cfg, self.server
        t = server.round
        start = time.perf_counter()
        ids = self.sample_clients()
        w_t, c_g = server.w, server.c_g
        for _ in ids:
            self.ledger.record("down", "weights", w_t)
            if cfg.uses_variates:
                self.ledger.record("down", "variates", c_g)

        def work(k):
            return client_update(self.clients[k], w_t, c_g, cfg, self.model, t)

        if cfg.threads > 1 and len(ids) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                returns = list(pool.map(work, ids))
        else:
            returns = [work(k) for k in ids]

        for r in returns:
            self.ledger.record("up", "weights", r.w_k)
            if cfg.uses_variates:
                self.ledger.record("up", "variates", r.c_delta)

        new_w = aggregate(w_t, returns, cfg.strategy)
        if cfg.uses_variates and not cfg.freeze_variates:
            server.c_g = update_global_variate(c_g, [r.c_delta for r in returns],
                                               server.num_clients)
        server.w = new_w
        server.round = t + 1
        metrics = self.measure(time.perf_counter() - start)
        self.history.append(metrics)
        return metrics

    def measure(self, seconds: float = 0.0) -> RoundMetrics:
        """Evaluate the current global backbone, each client with its own gates."""
        w = self.server.w
        local, sizes = [], []
        for c in self.clients:
            if c.val is None:
                continue
            local.append(evaluate(self.model, w, c.gates, c.val).top1)
            sizes.append(len(c.val))
        test_evals = []
        if self.test is not None:
            if self.cfg.dynamic_pruning:
                test_evals = [evaluate(self.model, w, c.gates, self.test) for c in self.clients]
            else:
                test_evals = [evaluate(self.model, w, None, self.test)]
        global_top1 = float(np.mean([e.top1 for e in test_evals])) if test_evals else 0.0
        pooled = float(np.dot(local, sizes) / sum(sizes)) if sizes else global_top1
        snap = self.ledger.snapshot()
        return RoundMetrics(
            round=self.server.round, avg_local_top1=pooled, global_top1=global_top1,
            client_top1=local,
            bytes_up_weights=snap["bytes_up_weights"],
            bytes_up_variates=snap["bytes_up_variates"],
            bytes_down_weights=snap["bytes_down_weights"],
            bytes_down_variates=snap["bytes_down_variates"],
            flops_per_sample=float(np.mean([e.flops_per_sample for e in test_evals]))
            if test_evals else 0.0,
            sparsity=float(np.mean([e.sparsity for e in test_evals])) if test_evals else 1.0,
            seconds=seconds)

    def run(self, rounds: int | None = None,
            on_round: Callable[[RoundMetrics], None] | None = None) -> list[RoundMetrics]:
        for _ in range(self.cfg.rounds if rounds is None else rounds):
            m = self.round()
            if on_round is not None:
                on_round(m)
        return self.history


def centralized_accuracy(model: ModelSpec, train: LabeledDataset, test: LabeledDataset,
                         epochs: int, lr: float = 0.1, batch_size: int = 64,
                         weight_decay: float = 5e-4, seed: int = 0) -> float:
    """Best test accuracy of plain pooled-data SGD (one client, no gates).

    Each epoch is one round of a single-client federation, so the schedule
    matches the federated runs epoch for epoch.
    """
    cfg = FLConfig(strategy="fedavg", dynamic_pruning=False, rounds=epochs, local_epochs=1,
                   lr=lr, batch_size=batch_size, weight_decay=weight_decay, seed=seed,
                   lr_schedule="constant")
    part = Partition([np.arange(len(train))], [np.zeros(0, dtype=np.int64)])
    fed = Federation.build(model, train, part, cfg, test)
    return max(m.global_top1 for m in fed.run())
