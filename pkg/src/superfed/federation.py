"""Server round loop and client local update.

One round: sample clients, broadcast the global model, let every selected
client run :func:`local_update`, then replace the global model with the
example-count weighted mean of the returned federated models. Local models
stay inside :class:`ClientState` and are never handed to the server.

With ``personalization_start >= rounds`` and ``mu = nu = 0`` the loop is plain
FedAvg; with ``mu > 0`` it is FedProx.
"""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from superfed import evaluation
from superfed.data import ClientSplit
from superfed.errors import NonFiniteError, ProtocolError
from superfed.mixing import MixScheme, RegularizerConfig, assemble_gradients, mix, sample_lambda
from superfed.nn import (
    OptimizerState,
    WeightVector,
    forward,
    init_weights,
    loss_and_grad,
    lr_at_round,
    sgd_step,
)
from superfed.rng import stream

log = logging.getLogger(__name__)

__all__ = [
    "LocalInit",
    "FedConfig",
    "ClientState",
    "ServerState",
    "RoundRecord",
    "LocalResult",
    "CommLog",
    "RunResult",
    "select_clients",
    "local_update",
    "aggregate",
    "aggregation_weights",
    "run",
]


class LocalInit(enum.Enum):
    FRESH = "fresh"
    COPY_GLOBAL = "copy"


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 50
    personalization_start: int = 20
    batch_size: int = 10
    local_epochs: int = 5
    clients: int = 50
    fraction: float = 0.1
    lr: float = 0.01
    mu: float = 0.01
    nu: float = 2.0
    scheme: MixScheme = MixScheme.MODEL
    seed: int = 0
    local_init: LocalInit = LocalInit.FRESH
    momentum: float = 0.9
    weight_decay: float = 1e-4
    cos_per_layer: bool = False
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", MixScheme.parse(self.scheme))
        object.__setattr__(self, "local_init", LocalInit(self.local_init))
        checks = [
            (self.rounds >= 0, "rounds", "must be >= 0"),
            (0 <= self.personalization_start <= self.rounds, "personalization_start",
             "must satisfy 0 <= L <= R"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.local_epochs >= 1, "local_epochs", "must be >= 1"),
            (self.clients >= 1, "clients", "must be >= 1"),
            (0.0 < self.fraction <= 1.0, "fraction", "must lie in (0, 1]"),
            (self.lr > 0.0, "lr", "must be positive"),
            (self.mu >= 0.0, "mu", "must be >= 0"),
            (self.nu >= 0.0, "nu", "must be >= 0"),
            (self.workers >= 1, "workers", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ValueError(f"{name} {msg}")

    @property
    def personalized(self) -> bool:
        """Whether any round samples a non-zero mixing coefficient."""
        return self.personalization_start < self.rounds

    @property
    def regularizer(self) -> RegularizerConfig:
        return RegularizerConfig(mu=self.mu, nu=self.nu, cos_per_layer=self.cos_per_layer)


@dataclass
class ClientState:
    id: int
    split: ClientSplit
    local_model: WeightVector | None = None

    @property
    def n_train(self) -> int:
        return len(self.split.train)


@dataclass
class RoundRecord:
    round: int
    selected: list[int]
    mean_train_loss: float
    wall_time: float
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class ServerState:
    global_model: WeightVector
    round: int = 0
    history: list[RoundRecord] = field(default_factory=list)


@dataclass
class LocalResult:
    client_id: int
    w_f: WeightVector
    n: int
    mean_loss: float


@dataclass
class CommLog:
    """Bytes moved over the simulated link, one entry per round."""

    down: list[int] = field(default_factory=list)
    up: list[int] = field(default_factory=list)

    def open_round(self) -> None:
        self.down.append(0)
        self.up.append(0)

    def send_down(self, w: WeightVector) -> WeightVector:
        self.down[-1] += w.nbytes
        return w.copy()

    def send_up(self, w: WeightVector) -> WeightVector:
        self.up[-1] += w.nbytes
        return w.copy()


@dataclass
class RunResult:
    server: ServerState
    report: "evaluation.EvalReport"
    comm: CommLog


def select_clients(rng: np.random.Generator, K: int, C: float, round: int | None = None) -> list[int]:
    """Uniform sample without replacement of ``max(floor(C*K), 1)`` client ids, ascending.

    ``round`` is informational; determinism per round comes from ``rng``.
    """
    if not 0.0 < C <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    # the epsilon stops 0.29 * 100 = 28.999999999999996 from flooring to 28
    m = max(int(np.floor(C * K + 1e-9)), 1)
    m = min(m, K)
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def local_update(client: ClientState, w_g: WeightVector, cfg: FedConfig, r: int) -> LocalResult:
    spec = w_g.spec
    train = client.split.train
    n = len(train)
    if n == 0:
        raise ProtocolError(f"client {client.id} has an empty training split")

    w_f = w_g.copy()
    if client.local_model is None:
        if cfg.local_init is LocalInit.FRESH:
            client.local_model = init_weights(spec, stream(cfg.seed, "local_init", client.id))
        else:
            client.local_model = w_g.copy()
    w_l = client.local_model
    w_l._check(w_g)

    reg = cfg.regularizer
    opt_f = OptimizerState.fresh(spec, cfg.momentum, cfg.weight_decay)
    opt_l = OptimizerState.fresh(spec, cfg.momentum, cfg.weight_decay)
    lr = lr_at_round(cfg.lr, r)
    order_rng = stream(cfg.seed, "batches", client.id, r)
    lam_rng = stream(cfg.seed, "lambda", client.id, r)
    x, y = train.features, train.labels

    loss_sum, batches = 0.0, 0
    for epoch in range(cfg.local_epochs):
        perm = order_rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            where = f"round {r}, client {client.id}, epoch {epoch}, batch {b}"
            lam = sample_lambda(lam_rng, cfg.scheme, r, cfg.personalization_start, spec.layer_count)
            w_mix = mix(w_f, w_l, lam)
            _, trace = forward(w_mix, x[idx])
            loss, task_grad = loss_and_grad(w_mix, trace, y[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at {where}")
            grad_f, grad_l = assemble_gradients(task_grad, lam, w_f, w_l, w_g, reg)
            w_f, opt_f = sgd_step(w_f, grad_f, opt_f, lr, where)
            w_l, opt_l = sgd_step(w_l, grad_l, opt_l, lr, where)
            loss_sum += loss
            batches += 1

    client.local_model = w_l
    return LocalResult(client.id, w_f, n, loss_sum / batches)


def aggregation_weights(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.sum()


def aggregate(models: Sequence[tuple[WeightVector, int]]) -> WeightVector:
    """Example-count weighted mean, summed in the order given (callers pass ascending client id)."""
    if not models:
        raise ProtocolError("cannot aggregate an empty set of models")
    if any(n < 1 for _, n in models):
        raise ProtocolError("every contribution needs n_i >= 1")
    first = models[0][0]
    weights = aggregation_weights([n for _, n in models])
    params = [np.zeros_like(p) for p in first.params]
    for (w, _), a in zip(models, weights):
        first._check(w)
        for acc, p in zip(params, w.params):
            acc += a * p
    return WeightVector(first.spec, params)


def _audit_no_local_models(server_arrays: list[np.ndarray], clients: Sequence[ClientState]) -> None:
    for c in clients:
        if c.local_model is None:
            continue
        for lp in c.local_model.params:
            for sp in server_arrays:
                if sp is lp or np.may_share_memory(sp, lp):
                    raise ProtocolError(f"local model of client {c.id} leaked to the server")


def run(
    cfg: FedConfig,
    clients: Sequence[ClientState],
    initial: WeightVector,
    *,
    eval_every: int = 0,
    lambda_grid: Sequence[float] | None = None,
    bins: int = 10,
    on_round: Callable[[RoundRecord, ServerState], None] | None = None,
) -> RunResult:
    """Execute ``cfg.rounds`` rounds and the final all-client evaluation.

    ``eval_every > 0`` additionally scores the global model on every client's
    test split after each ``eval_every``-th round. ``on_round`` sees each
    record as soon as the round completes, so partial histories survive a
    client abort.
    """
    by_id = {c.id: c for c in clients}
    if sorted(by_id) != list(range(cfg.clients)):
        raise ProtocolError(f"expected client ids 0..{cfg.clients - 1}")
    server = ServerState(initial.copy())
    comm = CommLog()
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None

    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            selected = select_clients(stream(cfg.seed, "select", round=r), cfg.clients, cfg.fraction, r)
            comm.open_round()
            broadcast = {cid: comm.send_down(server.global_model) for cid in selected}

            def work(cid: int) -> LocalResult:
                return local_update(by_id[cid], broadcast[cid], cfg, r)

            if pool is None:
                results = [work(cid) for cid in selected]
            else:
                results = list(pool.map(work, selected))

            results.sort(key=lambda res: res.client_id)
            uploads = [(comm.send_up(res.w_f), res.n) for res in results]
            new_global = aggregate(uploads)
            if not new_global.is_finite():
                raise NonFiniteError(f"aggregated global model is not finite after round {r}")
            server_arrays = list(new_global.params) + [p for w, _ in uploads for p in w.params]
            _audit_no_local_models(server_arrays, clients)

            server.global_model = new_global
            server.round = r + 1
            record = RoundRecord(
                round=r,
                selected=list(selected),
                mean_train_loss=float(np.mean([res.mean_loss for res in results])),
                wall_time=time.perf_counter() - t0,
            )
            if eval_every and (r + 1) % eval_every == 0:
                record.metrics = evaluation.global_metrics(server.global_model, clients)
            server.history.append(record)
            log.debug("round %d: clients %s, loss %.4f", r, selected, record.mean_train_loss)
            if on_round is not None:
                on_round(record, server)
    finally:
        if pool is not None:
            pool.shutdown()

    report = evaluation.evaluate_clients(
        clients,
        server.global_model,
        grid=lambda_grid,
        bins=bins,
        personalized=cfg.personalized,
    )
    return RunResult(server, report, comm)
