"""Datasets, synthetic data generation, and client partitioning.

Three partition schemes are supported: IID shuffling, per-class Dirichlet
proportion sampling, and a deterministic cyclic class split. All of them are
pure functions of (dataset, spec) and produce disjoint, exhaustive,
non-empty per-client index lists.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "PartitionSpec",
    "PartitionAssignment",
    "PartitionStats",
    "generate_synthetic",
    "generate_train_test",
    "load_dataset",
    "save_dataset_csv",
    "partition",
    "partition_stats",
]

DIRICHLET_MAX_RETRIES = 100


@dataclass(eq=False)
class Dataset:
    """Feature matrix, integer labels, and stable per-example ids.

    ``example_ids`` are the join keys for precomputed-logits tables, so they
    survive subsetting unchanged.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    example_ids: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.example_ids = np.asarray(self.example_ids, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.labels.size != n or self.example_ids.size != n:
            raise ValueError(
                f"row counts disagree: {n} feature rows, {self.labels.size} labels, "
                f"{self.example_ids.size} example ids"
            )
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            bad = self.labels[(self.labels < 0) | (self.labels >= self.num_classes)][0]
            raise ValueError(f"label {bad} out of range [0, {self.num_classes})")
        if np.unique(self.example_ids).size != n:
            raise ValueError("example_ids are not unique")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx], self.labels[idx], self.num_classes, self.example_ids[idx]
        )


@dataclass(frozen=True)
class PartitionSpec:
    """How to split a dataset across clients.

    ``kind`` is one of ``iid``, ``dirichlet`` (requires ``alpha``) or
    ``class_split`` (requires ``classes_per_client``).
    """

    kind: str
    n_clients: int
    seed: int = 0
    alpha: float | None = None
    classes_per_client: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("iid", "dirichlet", "class_split"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be positive, got {self.n_clients}")
        if self.kind == "dirichlet":
            if self.alpha is None or self.alpha <= 0:
                raise ValueError(f"dirichlet partition needs alpha > 0, got {self.alpha}")
        if self.kind == "class_split":
            if self.classes_per_client is None or self.classes_per_client < 1:
                raise ValueError(
                    f"class_split needs classes_per_client >= 1, got {self.classes_per_client}"
                )
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass(eq=False)
class PartitionAssignment:
    """Per-client index lists into one dataset."""

    per_client: list[np.ndarray]

    def __post_init__(self) -> None:
        self.per_client = [np.asarray(ix, dtype=np.int64).reshape(-1) for ix in self.per_client]

    @property
    def n_clients(self) -> int:
        return len(self.per_client)

    def validate(self, dataset: Dataset) -> None:
        """Check disjointness, exhaustiveness and non-emptiness."""
        total = 0
        for i, ix in enumerate(self.per_client):
            if ix.size == 0:
                raise ValueError(f"client {i} received no examples")
            total += ix.size
        merged = np.concatenate(self.per_client)
        if total != dataset.n or np.unique(merged).size != dataset.n:
            raise ValueError("client index lists are not a disjoint cover of the dataset")
        if merged.min() < 0 or merged.max() >= dataset.n:
            raise ValueError("client index out of dataset range")


@dataclass(eq=False)
class PartitionStats:
    sizes: np.ndarray
    class_histograms: np.ndarray  # shape (n_clients, num_classes)


def generate_synthetic(
    n_classes: int,
    n_per_class: int,
    input_dim: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means are random unit directions scaled by ``class_separation``;
    the generator draws the means first and then the noise, so everything is
    pinned by the seed.
    """
    if n_classes < 1 or n_per_class < 1 or input_dim < 1:
        raise ValueError("n_classes, n_per_class and input_dim must be positive")
    if class_separation <= 0:
        raise ValueError(f"class_separation must be positive, got {class_separation}")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n_classes, input_dim))
    means = class_separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    noise = rng.normal(size=(labels.size, input_dim))
    features = means[labels] + noise
    return Dataset(features, labels, n_classes, np.arange(labels.size, dtype=np.int64))


def generate_train_test(
    n_classes: int,
    train_per_class: int,
    test_per_class: int,
    input_dim: int,
    class_separation: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Train/test split drawn from the same blobs, with globally unique ids."""
    full = generate_synthetic(
        n_classes, train_per_class + test_per_class, input_dim, class_separation, seed
    )
    block = train_per_class + test_per_class
    within = np.arange(full.n) % block
    train_idx = np.flatnonzero(within < train_per_class)
    test_idx = np.flatnonzero(within >= train_per_class)
    return full.subset(train_idx), full.subset(test_idx)


def save_dataset_csv(dataset: Dataset, path) -> None:
    """Write the CSV form: header ``label:<num_classes>,x0,...``, then one
    row per example of label followed by features.

    CSV carries no id column; loading assigns row indices 0..n-1. When
    example ids must survive a roundtrip (logits-table joins), use the
    binary format instead.
    """
    cols = ",".join(f"x{i}" for i in range(dataset.input_dim))
    lines = [f"label:{dataset.num_classes},{cols}"]
    for row in range(dataset.n):
        feats = ",".join(repr(float(v)) for v in dataset.features[row])
        lines.append(f"{int(dataset.labels[row])},{feats}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_dataset_csv(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in (raw.strip() for raw in fh) if ln]
    if not lines:
        raise ValueError(f"{path}: empty dataset file")
    header = lines[0].split(",")
    if not header[0].startswith("label:"):
        raise ValueError(f"{path}: header must start with 'label:<num_classes>'")
    try:
        num_classes = int(header[0].split(":", 1)[1])
    except ValueError:
        raise ValueError(f"{path}: malformed class count in header {header[0]!r}") from None
    dim = len(header) - 1
    if dim < 1:
        raise ValueError(f"{path}: header declares no feature columns")
    n = len(lines) - 1
    features = np.empty((n, dim), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    for r, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise ValueError(f"{path}:{r}: expected {dim + 1} fields, got {len(parts)}")
        try:
            labels[r - 2] = int(parts[0])
        except ValueError:
            raise ValueError(f"{path}:{r}: column 1: malformed label {parts[0]!r}") from None
        for c, tok in enumerate(parts[1:], start=2):
            try:
                features[r - 2, c - 2] = float(tok)
            except ValueError:
                raise ValueError(f"{path}:{r}: column {c}: malformed number {tok!r}") from None
    return Dataset(features, labels, num_classes, np.arange(n, dtype=np.int64))


def load_dataset(path, format: str = "csv") -> Dataset:
    """Read a dataset from its CSV or binary on-disk form."""
    if format == "csv":
        return _load_dataset_csv(path)
    if format == "binary":
        from . import io as fio

        return fio.read_dataset(path)
    raise ValueError(f"unknown dataset format {format!r}")


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    target = proportions * total
    counts = np.floor(target).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = target - counts
        take = np.argsort(-frac, kind="stable")[:short]
        counts[take] += 1
    elif short < 0:
        take = np.argsort(-counts, kind="stable")[: -short]
        counts[take] -= 1
    return counts


def _partition_iid(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    if dataset.n < spec.n_clients:
        raise ValueError(
            f"cannot split {dataset.n} examples across {spec.n_clients} clients non-emptily"
        )
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(dataset.n)
    return [np.sort(part) for part in np.array_split(perm, spec.n_clients)]


def _partition_dirichlet(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    for attempt in range(DIRICHLET_MAX_RETRIES):
        rng = np.random.default_rng([spec.seed, attempt])
        buckets: list[list[np.ndarray]] = [[] for _ in range(spec.n_clients)]
        for cls in range(dataset.num_classes):
            cls_idx = np.flatnonzero(dataset.labels == cls)
            if cls_idx.size == 0:
                continue
            cls_idx = rng.permutation(cls_idx)
            proportions = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            counts = _largest_remainder_counts(proportions, cls_idx.size)
            stops = np.cumsum(counts)[:-1]
            for client, chunk in enumerate(np.split(cls_idx, stops)):
                if chunk.size:
                    buckets[client].append(chunk)
        per_client = [
            np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64) for b in buckets
        ]
        if all(ix.size > 0 for ix in per_client):
            return per_client
    raise ValueError(
        f"dirichlet partition left a client empty after {DIRICHLET_MAX_RETRIES} retries "
        f"(alpha={spec.alpha}, n_clients={spec.n_clients})"
    )


def _partition_class_split(dataset: Dataset, spec: PartitionSpec) -> list[np.ndarray]:
    k = spec.classes_per_client
    c = dataset.num_classes
    if k > c:
        raise ValueError(f"classes_per_client {k} exceeds num_classes {c}")
    if (spec.n_clients * k) % c != 0:
        raise ValueError(
            f"n_clients * classes_per_client ({spec.n_clients} * {k}) "
            f"must be a multiple of num_classes ({c})"
        )
    holders: list[list[int]] = [[] for _ in range(c)]
    for client in range(spec.n_clients):
        for j in range(k):
            holders[(k * client + j) % c].append(client)
    rng = np.random.default_rng(spec.seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(spec.n_clients)]
    for cls in range(c):
        cls_idx = rng.permutation(np.flatnonzero(dataset.labels == cls))
        for holder, chunk in zip(holders[cls], np.array_split(cls_idx, len(holders[cls]))):
            if chunk.size:
                buckets[holder].append(chunk)
    per_client = []
    for client, b in enumerate(buckets):
        if not b:
            raise ValueError(f"class split left client {client} empty")
        per_client.append(np.sort(np.concatenate(b)))
    return per_client


def partition(dataset: Dataset, spec: PartitionSpec) -> PartitionAssignment:
    """Split a dataset's example indices across clients per the spec."""
    if spec.kind == "iid":
        per_client = _partition_iid(dataset, spec)
    elif spec.kind == "dirichlet":
        per_client = _partition_dirichlet(dataset, spec)
    else:
        per_client = _partition_class_split(dataset, spec)
    assignment = PartitionAssignment(per_client)
    assignment.validate(dataset)
    return assignment


def partition_stats(dataset: Dataset, assignment: PartitionAssignment) -> PartitionStats:
    """Per-client sizes and class histograms (rows sum to client sizes)."""
    hist = np.zeros((assignment.n_clients, dataset.num_classes), dtype=np.int64)
    sizes = np.zeros(assignment.n_clients, dtype=np.int64)
    for i, ix in enumerate(assignment.per_client):
        if ix.size and (ix.min() < 0 or ix.max() >= dataset.n):
            raise ValueError(f"client {i} index out of dataset range")
        sizes[i] = ix.size
        hist[i] = np.bincount(dataset.labels[ix], minlength=dataset.num_classes)
    return PartitionStats(sizes, hist)
