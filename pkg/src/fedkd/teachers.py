"""Frozen teacher models that supply class logits for distillation.

A teacher is anything that maps a batch to a logits matrix and never changes
afterwards. Three flavors exist: a centrally pretrained model, a per-client
copy with a fine-tuned output layer, and a lookup table of precomputed
logits keyed by example id (the injection point for logits exported from
real models).
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .losses import cross_entropy
from .nn import (
    ArchDescriptor,
    Batch,
    ModelParams,
    OptimizerState,
    _layer_slots,
    backward,
    forward,
    init_params,
    sgd_step,
)

__all__ = [
    "Teacher",
    "ModelTeacher",
    "LogitsTable",
    "LogitsTableTeacher",
    "ClientTeacherSet",
    "pretrain_teacher",
    "finetune_teacher_locally",
    "teacher_from_logits_table",
    "build_client_teacher_sets",
]


class Teacher(abc.ABC):
    """Read-only mapping from a batch to (batch_size, num_classes) logits."""

    kind: str
    num_classes: int

    @abc.abstractmethod
    def logits(self, batch: Batch) -> np.ndarray:
        ...


class ModelTeacher(Teacher):
    """A frozen feedforward model acting as a teacher.

    The parameter vector is copied at construction and marked read-only, so
    the teacher's outputs cannot drift during federation.
    """

    def __init__(self, params: ModelParams, kind: str = "pretrained",
                 train_accuracy: float | None = None) -> None:
        frozen = params.values.copy()
        frozen.setflags(write=False)
        self._params = ModelParams(params.arch, frozen)
        self._params.values.setflags(write=False)
        self.kind = kind
        self.num_classes = params.arch.num_classes
        self.train_accuracy = train_accuracy

    @property
    def params(self) -> ModelParams:
        return self._params

    def logits(self, batch: Batch) -> np.ndarray:
        return forward(self._params, batch)


@dataclass(eq=False)
class LogitsTable:
    """example_id -> float32 logit vector, all of one length."""

    mapping: dict[int, np.ndarray]
    num_classes: int
    source: str = ""

    def __post_init__(self) -> None:
        cleaned: dict[int, np.ndarray] = {}
        for example_id, vec in self.mapping.items():
            arr = np.asarray(vec, dtype=np.float32).reshape(-1)
            if arr.size != self.num_classes:
                raise ValueError(
                    f"logits for example {example_id} have length {arr.size}, "
                    f"expected {self.num_classes}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite logits for example {example_id}")
            cleaned[int(example_id)] = arr
        self.mapping = cleaned


class LogitsTableTeacher(Teacher):
    """Answers by example-id lookup; unknown ids are an error, never guessed."""

    def __init__(self, table: LogitsTable) -> None:
        self.kind = "logits_table"
        self.num_classes = table.num_classes
        self._table = table

    def logits(self, batch: Batch) -> np.ndarray:
        if batch.example_ids is None:
            raise ValueError("logits-table teacher needs batches with example_ids")
        out = np.empty((batch.size, self.num_classes), dtype=np.float64)
        for row, example_id in enumerate(batch.example_ids):
            vec = self._table.mapping.get(int(example_id))
            if vec is None:
                raise KeyError(f"example id {int(example_id)} not in logits table")
            out[row] = vec
        return out


@dataclass(eq=False)
class ClientTeacherSet:
    """One teacher list per client; lists may differ in length and kind."""

    per_client: list[list[Teacher]]

    @property
    def n_clients(self) -> int:
        return len(self.per_client)


def _train_accuracy(params: ModelParams, dataset: Dataset) -> float:
    logits = forward(params, Batch(dataset.features, dataset.labels))
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def _sgd_epochs(
    params: ModelParams,
    dataset: Dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int,
    train_slices: list[slice] | None = None,
) -> ModelParams:
    opt = OptimizerState(learning_rate=lr, weight_decay=0.0)
    for _ in range(epochs):
        perm = rng.permutation(dataset.n)
        for start in range(0, dataset.n, batch_size):
            sel = perm[start : start + batch_size]
            batch = Batch(dataset.features[sel], dataset.labels[sel], dataset.example_ids[sel])
            loss = cross_entropy(forward(params, batch), batch.labels)
            if not np.isfinite(loss.value):
                raise RuntimeError("teacher training diverged: non-finite loss")
            grads = backward(params, batch, loss.grad)
            if train_slices is None:
                params = sgd_step(params, grads, opt, 0)
            else:
                # Untrained slices keep their exact bits; only the listed
                # slices move.
                values = params.values.copy()
                for sl in train_slices:
                    values[sl] -= lr * grads[sl]
                params = ModelParams(params.arch, values)
    return params


def pretrain_teacher(
    dataset: Dataset,
    arch: ArchDescriptor,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> ModelTeacher:
    """Train a model centrally with plain cross-entropy and freeze it.

    Deterministic under (dataset, arch, epochs, lr, seed); the final train
    accuracy is recorded on the returned teacher.
    """
    if dataset.n == 0:
        raise ValueError("cannot pretrain a teacher on an empty dataset")
    params = init_params(arch, seed)
    rng = np.random.default_rng([seed, 1])
    params = _sgd_epochs(params, dataset, epochs, lr, rng, batch_size)
    return ModelTeacher(params, kind="pretrained", train_accuracy=_train_accuracy(params, dataset))


def finetune_teacher_locally(
    base: ModelTeacher,
    client_data: Dataset,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
) -> ModelTeacher:
    """Copy a pretrained teacher and retrain only its final linear layer on
    one client's data (the linear-probing analog). The base teacher is left
    untouched."""
    if base.kind != "pretrained":
        raise ValueError(f"fine-tuning expects a pretrained teacher, got kind {base.kind!r}")
    if client_data.n == 0:
        raise ValueError("cannot fine-tune on an empty client slice")
    params = base.params.copy()
    head = _layer_slots(params.arch)[-1]
    rng = np.random.default_rng([seed, 2])
    params = _sgd_epochs(
        params, client_data, epochs, lr, rng, batch_size, train_slices=[head.w, head.b]
    )
    return ModelTeacher(
        params, kind="local_finetuned", train_accuracy=_train_accuracy(params, client_data)
    )


def teacher_from_logits_table(table: LogitsTable) -> LogitsTableTeacher:
    return LogitsTableTeacher(table)


def build_client_teacher_sets(
    policy: str,
    n_clients: int,
    pool: Sequence[Teacher] = (),
    seed: int = 0,
    per_client: Sequence[Sequence[Teacher]] | None = None,
) -> ClientTeacherSet:
    """Assign teachers to clients.

    ``uniform`` gives every client the single pooled teacher;
    ``random_choice`` samples one pool entry per client with uniform prior;
    ``per_client_list`` takes explicit lists.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be positive, got {n_clients}")
    if policy == "uniform":
        if len(pool) != 1:
            raise ValueError(f"uniform policy needs exactly one pooled teacher, got {len(pool)}")
        return ClientTeacherSet([[pool[0]] for _ in range(n_clients)])
    if policy == "random_choice":
        if len(pool) == 0:
            raise ValueError("random_choice policy needs a non-empty teacher pool")
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, len(pool), size=n_clients)
        return ClientTeacherSet([[pool[int(p)]] for p in picks])
    if policy == "per_client_list":
        if per_client is None or len(per_client) != n_clients:
            got = "none" if per_client is None else str(len(per_client))
            raise ValueError(f"per_client_list needs {n_clients} teacher lists, got {got}")
        return ClientTeacherSet([list(ts) for ts in per_client])
    raise ValueError(f"unknown teacher assignment policy {policy!r}")
