"""The server round loop: sample clients, broadcast, local updates,
size-weighted aggregation, periodic evaluation.

Four local-training algorithms are selectable: plain federated averaging
(``fedavg``), averaging with a proximal penalty (``fedprox``), mutual
learning against a persistent private model (``fml``), and the
teacher-distillation objective (``fed_lpfm``). Per-client randomness is a
pure function of (seed, round, client_id), so sequential and concurrent
client execution produce bit-identical rounds.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PartitionAssignment
from .losses import (
    DistillConfig,
    combined_loss,
    cross_entropy,
    mutual_learning_losses,
    proximal_penalty,
)
from .nn import (
    ArchDescriptor,
    Batch,
    ModelParams,
    OptimizerState,
    backward,
    forward,
    init_params,
    sgd_step,
)
from .teachers import ClientTeacherSet, Teacher

__all__ = [
    "ALGORITHMS",
    "FederationConfig",
    "ClientState",
    "RoundMetrics",
    "sample_clients",
    "local_update",
    "aggregate",
    "evaluate",
    "run_federation",
]

ALGORITHMS = ("fed_lpfm", "fedavg", "fedprox", "fml")


@dataclass(frozen=True)
class FederationConfig:
    """Everything a federated run needs besides the data and the teachers."""

    algorithm: str
    n_clients: int
    rounds: int
    local_epochs: int = 1
    batch_size: int = 32
    base_lr: float = 0.01
    weight_decay: float = 5e-4
    lr_milestone: int | None = 200
    lr_factor: float = 0.1
    client_fraction: float = 1.0
    distill: DistillConfig = field(default_factory=DistillConfig)
    mu: float = 0.01
    beta: float = 0.5
    seed: int = 0
    eval_every: int = 10

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be positive, got {self.n_clients}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ValueError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.mu < 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")

    def optimizer(self) -> OptimizerState:
        milestones = () if self.lr_milestone is None else (self.lr_milestone,)
        return OptimizerState(
            learning_rate=self.base_lr,
            weight_decay=self.weight_decay,
            milestones=milestones,
            factor=self.lr_factor,
        )


@dataclass(eq=False)
class ClientState:
    """One client's slice, teachers, and (for fml) its private model.

    Only the proxy ModelParams produced by local_update ever leave a client;
    teachers and raw data stay local by construction.
    """

    client_id: int
    dataset: Dataset
    indices: np.ndarray
    teachers: list[Teacher] = field(default_factory=list)
    private: ModelParams | None = None

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.indices.size == 0:
            raise ValueError(f"client {self.client_id} has no examples")

    @property
    def n_examples(self) -> int:
        return int(self.indices.size)


@dataclass(eq=False)
class RoundMetrics:
    round_index: int
    participants: tuple[int, ...]
    accuracy: float
    train_loss: float
    lr: float
    duration_ms: float


def sample_clients(n_clients: int, fraction: float, round_index: int, seed: int) -> np.ndarray:
    """Uniform sample without replacement of max(1, round(fraction * n))
    client ids, ascending; fraction 1 short-circuits to all clients."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return np.arange(n_clients, dtype=np.int64)
    size = max(1, int(np.floor(fraction * n_clients + 0.5)))
    rng = np.random.default_rng([seed, round_index])
    return np.sort(rng.choice(n_clients, size=size, replace=False)).astype(np.int64)


def _client_batches(client: ClientState, cfg: FederationConfig, rng: np.random.Generator):
    """Shuffled minibatches over the client's slice; the last short batch is kept."""
    ds = client.dataset
    for epoch in range(cfg.local_epochs):
        order = client.indices[rng.permutation(client.n_examples)]
        for start in range(0, client.n_examples, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            yield epoch, Batch(ds.features[sel], ds.labels[sel], ds.example_ids[sel])


def local_update(
    global_params: ModelParams,
    client: ClientState,
    cfg: FederationConfig,
    round_index: int,
) -> tuple[ModelParams, float]:
    """Run Q local epochs of minibatch SGD from a copy of the broadcast
    parameters and return (updated proxy params, mean train loss)."""
    opt = cfg.optimizer()
    params = global_params.copy()
    rng = np.random.default_rng([cfg.seed, round_index, client.client_id])
    query_teachers = cfg.algorithm == "fed_lpfm" and cfg.distill.lam < 1.0
    losses: list[float] = []

    for epoch, batch in _client_batches(client, cfg, rng):
        if cfg.algorithm == "fml":
            if client.private is None:
                raise ValueError(f"client {client.client_id}: fml requires a private model")
            proxy_logits = forward(params, batch)
            private_logits = forward(client.private, batch)
            proxy_loss, private_loss = mutual_learning_losses(
                proxy_logits, private_logits, batch.labels, cfg.beta
            )
            loss_value = proxy_loss.value
            if not np.isfinite(loss_value) or not np.isfinite(private_loss.value):
                raise RuntimeError(
                    f"non-finite loss at round {round_index}, client {client.client_id}, "
                    f"epoch {epoch}"
                )
            proxy_grads = backward(params, batch, proxy_loss.grad)
            private_grads = backward(client.private, batch, private_loss.grad)
            params = sgd_step(params, proxy_grads, opt, round_index)
            client.private = sgd_step(client.private, private_grads, opt, round_index)
        else:
            logits = forward(params, batch)
            if cfg.algorithm == "fed_lpfm":
                teacher_logits = [t.logits(batch) for t in client.teachers] if query_teachers else []
                loss = combined_loss(logits, batch.labels, teacher_logits, cfg.distill)
            else:
                loss = cross_entropy(logits, batch.labels)
            loss_value = loss.value
            grads = backward(params, batch, loss.grad)
            if cfg.algorithm == "fedprox" and cfg.mu > 0.0:
                prox_value, prox_grad = proximal_penalty(params, global_params, cfg.mu)
                loss_value += prox_value
                grads = grads + prox_grad
            if not np.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss at round {round_index}, client {client.client_id}, "
                    f"epoch {epoch}"
                )
            params = sgd_step(params, grads, opt, round_index)
        losses.append(loss_value)
    return params, float(np.mean(losses))


def aggregate(models: list[ModelParams], sizes: list[int]) -> ModelParams:
    """Size-weighted parameter average: sum_i (n_i / sum_j n_j) * theta_i.

    Weights are computed once in float64 and applied in the given order, so
    the result is independent of who finished training first. Identical
    inputs are returned exactly.
    """
    if len(models) == 0:
        raise ValueError("cannot aggregate an empty model list")
    if len(models) != len(sizes):
        raise ValueError(f"{len(models)} models but {len(sizes)} sizes")
    arch = models[0].arch
    for m in models[1:]:
        if m.arch != arch:
            raise ValueError("cannot aggregate models with different architectures")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"sizes must be positive, got {sizes}")
    if all(np.array_equal(m.values, models[0].values) for m in models[1:]):
        return models[0].copy()
    weights = np.asarray(sizes, dtype=np.float64)
    weights = weights / weights.sum()
    acc = np.zeros_like(models[0].values)
    for w, m in zip(weights, models):
        acc += w * m.values
    return ModelParams(arch, acc)


def evaluate(params: ModelParams, test: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if test.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = forward(params, Batch(test.features, test.labels, test.example_ids))
    return float((logits.argmax(axis=1) == test.labels).mean())


def _validate_run_inputs(
    cfg: FederationConfig,
    assignment: PartitionAssignment,
    teacher_sets: ClientTeacherSet | None,
) -> None:
    if assignment.n_clients != cfg.n_clients:
        raise ValueError(
            f"assignment covers {assignment.n_clients} clients, config says {cfg.n_clients}"
        )
    if teacher_sets is not None and teacher_sets.n_clients != cfg.n_clients:
        raise ValueError(
            f"teacher sets cover {teacher_sets.n_clients} clients, config says {cfg.n_clients}"
        )
    if cfg.algorithm == "fed_lpfm" and cfg.distill.lam < 1.0:
        if teacher_sets is None:
            raise ValueError("fed_lpfm with lambda < 1 requires teachers")
        for i, ts in enumerate(teacher_sets.per_client):
            if len(ts) == 0:
                raise ValueError(f"client {i} has no teachers but lambda < 1")


def run_federation(
    cfg: FederationConfig,
    train: Dataset,
    test: Dataset,
    assignment: PartitionAssignment,
    teacher_sets: ClientTeacherSet | None,
    arch: ArchDescriptor,
    parallel: bool = False,
) -> tuple[list[RoundMetrics], ModelParams]:
    """Run the full round loop and return (per-evaluation metrics, final params).

    The proxy model starts from init_params(arch, cfg.seed); fml private
    models start from per-client seeds derived from cfg.seed. Metrics are
    recorded every ``eval_every`` rounds and on the final round.
    """
    _validate_run_inputs(cfg, assignment, teacher_sets)
    clients = []
    for i in range(cfg.n_clients):
        teachers = list(teacher_sets.per_client[i]) if teacher_sets is not None else []
        private = None
        if cfg.algorithm == "fml":
            private_seed = int(np.random.SeedSequence([cfg.seed, 1, i]).generate_state(1)[0])
            private = init_params(arch, private_seed)
        clients.append(ClientState(i, train, assignment.per_client[i], teachers, private))

    global_params = init_params(arch, cfg.seed)
    opt = cfg.optimizer()
    metrics: list[RoundMetrics] = []

    for t in range(cfg.rounds):
        started = time.perf_counter()
        selected = sample_clients(cfg.n_clients, cfg.client_fraction, t, cfg.seed)

        def _update(cid: int):
            return local_update(global_params, clients[cid], cfg, t)

        if parallel and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=min(len(selected), 8)) as pool:
                results = list(pool.map(_update, selected))
        else:
            results = [_update(int(cid)) for cid in selected]

        updated = [params for params, _ in results]
        sizes = [clients[int(cid)].n_examples for cid in selected]
        global_params = aggregate(updated, sizes)

        if (t + 1) % cfg.eval_every == 0 or t == cfg.rounds - 1:
            accuracy = evaluate(global_params, test)
            metrics.append(
                RoundMetrics(
                    round_index=t,
                    participants=tuple(int(c) for c in selected),
                    accuracy=accuracy,
                    train_loss=float(np.mean([loss for _, loss in results])),
                    lr=opt.lr_at(t),
                    duration_ms=(time.perf_counter() - started) * 1000.0,
                )
            )
    return metrics, global_params
