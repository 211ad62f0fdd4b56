"""Bit-exact on-disk formats and run configuration.

Three little-endian binary formats: model checkpoints (``FFCK``), datasets
(``FFDS``) and precomputed-logits tables (``FFLT``). Checkpoints and
datasets carry float64 payloads; logits tables carry float32, matching what
external model exporters produce. Readers validate everything up front and
never hand back partial objects.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Any, BinaryIO

import numpy as np

from .data import Dataset, PartitionSpec
from .federation import ALGORITHMS, FederationConfig, RoundMetrics
from .losses import DistillConfig
from .nn import ArchDescriptor, ModelParams
from .teachers import LogitsTable

__all__ = [
    "FormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "CountMismatchError",
    "DuplicateIdError",
    "ConfigError",
    "write_checkpoint",
    "read_checkpoint",
    "write_dataset",
    "read_dataset",
    "write_logits_table",
    "read_logits_table",
    "METRICS_HEADER",
    "append_metrics",
    "TeacherSource",
    "TeacherSetup",
    "FinetuneSetup",
    "DatasetRefs",
    "SyntheticSpec",
    "RunSetup",
    "load_run_config",
]

CHECKPOINT_MAGIC = b"FFCK"
DATASET_MAGIC = b"FFDS"
LOGITS_MAGIC = b"FFLT"
FORMAT_VERSION = 1

METRICS_HEADER = "round,algorithm,seed,clients,accuracy,train_loss,lr,duration_ms"


class FormatError(Exception):
    """Base for malformed binary files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class DuplicateIdError(FormatError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key path."""


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"file ends inside {what} ({len(data)}/{n} bytes)")
    return data


def _read_header(fh: BinaryIO, magic: bytes, kind: str) -> None:
    got = _read_exact(fh, 4, "magic bytes")
    if got != magic:
        raise BadMagicError(f"not a {kind} file: magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(fh, 2, "format version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{kind} format version {version} is not supported")


def _expect_eof(fh: BinaryIO, kind: str) -> None:
    if fh.read(1):
        raise CountMismatchError(f"{kind} file has trailing bytes beyond the declared payload")


# --- checkpoints -----------------------------------------------------------


def write_checkpoint(params: ModelParams, path) -> None:
    arch = params.arch
    norm_tag = arch.groups if arch.norm == "group" else 0
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", arch.input_dim))
        fh.write(struct.pack("<I", len(arch.hidden_dims)))
        for h in arch.hidden_dims:
            fh.write(struct.pack("<I", h))
        fh.write(struct.pack("<I", arch.num_classes))
        fh.write(struct.pack("<I", norm_tag))
        fh.write(struct.pack("<Q", params.values.size))
        fh.write(params.values.astype("<f8", copy=False).tobytes())


def read_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        _read_header(fh, CHECKPOINT_MAGIC, "checkpoint")
        (input_dim,) = struct.unpack("<I", _read_exact(fh, 4, "input dim"))
        (n_hidden,) = struct.unpack("<I", _read_exact(fh, 4, "hidden layer count"))
        hidden = struct.unpack(f"<{n_hidden}I", _read_exact(fh, 4 * n_hidden, "hidden dims"))
        (num_classes,) = struct.unpack("<I", _read_exact(fh, 4, "class count"))
        (norm_tag,) = struct.unpack("<I", _read_exact(fh, 4, "norm tag"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "parameter count"))
        arch = ArchDescriptor(
            input_dim=input_dim,
            hidden_dims=hidden,
            num_classes=num_classes,
            norm="group" if norm_tag else "none",
            groups=norm_tag if norm_tag else 8,
        )
        if count != arch.param_count():
            raise CountMismatchError(
                f"checkpoint declares {count} parameters, architecture implies "
                f"{arch.param_count()}"
            )
        payload = _read_exact(fh, 8 * count, "parameter payload")
        _expect_eof(fh, "checkpoint")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(arch, values)


# --- datasets (binary) -----------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<Q", dataset.n))
        fh.write(struct.pack("<I", dataset.input_dim))
        fh.write(struct.pack("<I", dataset.num_classes))
        fh.write(dataset.example_ids.astype("<u8").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.features.astype("<f8", copy=False).tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        _read_header(fh, DATASET_MAGIC, "dataset")
        (n,) = struct.unpack("<Q", _read_exact(fh, 8, "example count"))
        (dim,) = struct.unpack("<I", _read_exact(fh, 4, "input dim"))
        (num_classes,) = struct.unpack("<I", _read_exact(fh, 4, "class count"))
        ids = np.frombuffer(_read_exact(fh, 8 * n, "example ids"), dtype="<u8")
        labels = np.frombuffer(_read_exact(fh, 4 * n, "labels"), dtype="<u4")
        feats = np.frombuffer(_read_exact(fh, 8 * n * dim, "features"), dtype="<f8")
        _expect_eof(fh, "dataset")
    return Dataset(
        feats.astype(np.float64).reshape(n, dim),
        labels.astype(np.int64),
        num_classes,
        ids.astype(np.int64),
    )


# --- logits tables ---------------------------------------------------------


def write_logits_table(table: LogitsTable, path) -> None:
    source = table.source.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(LOGITS_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<I", table.num_classes))
        fh.write(struct.pack("<Q", len(table.mapping)))
        for example_id, vec in table.mapping.items():
            fh.write(struct.pack("<Q", example_id))
            fh.write(vec.astype("<f4", copy=False).tobytes())
        fh.write(struct.pack("<I", len(source)))
        fh.write(source)


def read_logits_table(path) -> LogitsTable:
    with open(path, "rb") as fh:
        _read_header(fh, LOGITS_MAGIC, "logits table")
        (num_classes,) = struct.unpack("<I", _read_exact(fh, 4, "class count"))
        (n_entries,) = struct.unpack("<Q", _read_exact(fh, 8, "entry count"))
        mapping: dict[int, np.ndarray] = {}
        for _ in range(n_entries):
            (example_id,) = struct.unpack("<Q", _read_exact(fh, 8, "example id"))
            vec = np.frombuffer(
                _read_exact(fh, 4 * num_classes, f"logits of example {example_id}"),
                dtype="<f4",
            ).astype(np.float32)
            if example_id in mapping:
                raise DuplicateIdError(f"duplicate example id {example_id} in logits table")
            mapping[example_id] = vec
        (src_len,) = struct.unpack("<I", _read_exact(fh, 4, "source description length"))
        source = _read_exact(fh, src_len, "source description").decode("utf-8")
        _expect_eof(fh, "logits table")
    return LogitsTable(mapping, num_classes, source)


# --- metrics CSV -----------------------------------------------------------


def append_metrics(metrics: RoundMetrics, path, *, algorithm: str, seed: int) -> None:
    """Append one CSV row; the header is written once, on first use."""
    need_header = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if need_header:
            fh.write(METRICS_HEADER + "\n")
        fh.write(
            f"{metrics.round_index},{algorithm},{seed},{len(metrics.participants)},"
            f"{metrics.accuracy:.6f},{metrics.train_loss:.6f},{metrics.lr:.8g},"
            f"{metrics.duration_ms:.3f}\n"
        )


# --- run configuration -----------------------------------------------------


@dataclass(frozen=True)
class TeacherSource:
    """One pool entry: pretrain a fresh stand-in, or load from disk."""

    kind: str  # pretrain | checkpoint | logits_table
    path: str | None = None
    hidden_dims: tuple[int, ...] = (64,)
    norm: str = "group"
    groups: int = 8
    epochs: int = 50
    lr: float = 0.05
    seed: int = 1
    batch_size: int = 32


@dataclass(frozen=True)
class FinetuneSetup:
    epochs: int = 5
    lr: float = 0.05
    batch_size: int = 32


@dataclass(frozen=True)
class TeacherSetup:
    assignment: str  # uniform | random_choice
    pool: tuple[TeacherSource, ...]
    finetune: FinetuneSetup | None = None
    seed: int = 0


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int
    train_per_class: int
    test_per_class: int
    input_dim: int
    class_separation: float
    seed: int = 0


@dataclass(frozen=True)
class DatasetRefs:
    """Either file paths or an inline synthetic generator spec."""

    train_path: str | None = None
    test_path: str | None = None
    format: str = "csv"
    synthetic: SyntheticSpec | None = None


@dataclass(eq=False)
class RunSetup:
    federation: FederationConfig
    arch: ArchDescriptor
    partition: PartitionSpec
    teachers: TeacherSetup | None
    dataset: DatasetRefs
    resolved: dict


def _typename(value: Any) -> str:
    return type(value).__name__


def _get(section: dict, path: str, key: str, types, default=..., required=False):
    where = f"{path}.{key}" if path else key
    if key not in section:
        if required or default is ...:
            raise ConfigError(f"{where}: missing required key")
        return default
    value = section[key]
    if value is None and not required and default is None:
        return None
    if types is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) and types is not bool:
        raise ConfigError(f"{where}: expected {types.__name__}, got bool")
    if not isinstance(value, types):
        raise ConfigError(
            f"{where}: expected {getattr(types, '__name__', types)}, got {_typename(value)}"
        )
    return value


def _reject_unknown(section: dict, path: str, allowed: set[str]) -> None:
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")


def _parse_distill(section: dict) -> DistillConfig:
    _reject_unknown(section, "distill", {"lambda", "temperature", "kl_direction"})
    lam = _get(section, "distill", "lambda", float, default=0.5)
    temperature = _get(section, "distill", "temperature", float, default=1.0)
    direction = _get(section, "distill", "kl_direction", str, default="student_first")
    try:
        return DistillConfig(lam=lam, temperature=temperature, kl_direction=direction)
    except ValueError as exc:
        raise ConfigError(f"distill: {exc}") from None


def _parse_model(section: dict) -> ArchDescriptor:
    _reject_unknown(section, "model", {"hidden_dims", "norm", "groups"})
    hidden = _get(section, "model", "hidden_dims", list, default=[64])
    norm = _get(section, "model", "norm", str, default="group")
    groups = _get(section, "model", "groups", int, default=8)
    if not all(isinstance(h, int) and not isinstance(h, bool) for h in hidden):
        raise ConfigError("model.hidden_dims: expected a list of integers")
    # input_dim / num_classes come from the dataset at run time; placeholder
    # values here are replaced before any model is built.
    return ArchDescriptor(input_dim=1, hidden_dims=tuple(hidden), num_classes=2,
                          norm=norm, groups=groups)


def _parse_partition(section: dict) -> PartitionSpec:
    _reject_unknown(
        section, "partition", {"kind", "n_clients", "seed", "alpha", "classes_per_client"}
    )
    kind = _get(section, "partition", "kind", str, required=True)
    n_clients = _get(section, "partition", "n_clients", int, required=True)
    seed = _get(section, "partition", "seed", int, default=0)
    alpha = _get(section, "partition", "alpha", float, default=None)
    cpc = _get(section, "partition", "classes_per_client", int, default=None)
    try:
        return PartitionSpec(
            kind=kind, n_clients=n_clients, seed=seed, alpha=alpha, classes_per_client=cpc
        )
    except ValueError as exc:
        raise ConfigError(f"partition: {exc}") from None


def _parse_teacher_source(entry: dict, path: str) -> TeacherSource:
    kind = _get(entry, path, "kind", str, required=True)
    if kind == "pretrain":
        _reject_unknown(
            entry, path, {"kind", "hidden_dims", "norm", "groups", "epochs", "lr", "seed", "batch_size"}
        )
        hidden = _get(entry, path, "hidden_dims", list, default=[64])
        if not all(isinstance(h, int) and not isinstance(h, bool) for h in hidden):
            raise ConfigError(f"{path}.hidden_dims: expected a list of integers")
        return TeacherSource(
            kind="pretrain",
            hidden_dims=tuple(hidden),
            norm=_get(entry, path, "norm", str, default="group"),
            groups=_get(entry, path, "groups", int, default=8),
            epochs=_get(entry, path, "epochs", int, default=50),
            lr=_get(entry, path, "lr", float, default=0.05),
            seed=_get(entry, path, "seed", int, default=1),
            batch_size=_get(entry, path, "batch_size", int, default=32),
        )
    if kind in ("checkpoint", "logits_table"):
        _reject_unknown(entry, path, {"kind", "path"})
        return TeacherSource(kind=kind, path=_get(entry, path, "path", str, required=True))
    raise ConfigError(f"{path}.kind: unknown teacher source kind {kind!r}")


def _parse_teachers(section: dict) -> TeacherSetup:
    _reject_unknown(section, "teachers", {"assignment", "pool", "finetune", "seed"})
    assignment = _get(section, "teachers", "assignment", str, default="uniform")
    if assignment not in ("uniform", "random_choice"):
        raise ConfigError(
            f"teachers.assignment: expected 'uniform' or 'random_choice', got {assignment!r}"
        )
    pool_raw = _get(section, "teachers", "pool", list, required=True)
    if len(pool_raw) == 0:
        raise ConfigError("teachers.pool: must not be empty")
    pool = []
    for i, entry in enumerate(pool_raw):
        if not isinstance(entry, dict):
            raise ConfigError(f"teachers.pool[{i}]: expected an object")
        pool.append(_parse_teacher_source(entry, f"teachers.pool[{i}]"))
    finetune = None
    if section.get("finetune") is not None:
        ft = section["finetune"]
        if not isinstance(ft, dict):
            raise ConfigError("teachers.finetune: expected an object or null")
        _reject_unknown(ft, "teachers.finetune", {"epochs", "lr", "batch_size"})
        finetune = FinetuneSetup(
            epochs=_get(ft, "teachers.finetune", "epochs", int, default=5),
            lr=_get(ft, "teachers.finetune", "lr", float, default=0.05),
            batch_size=_get(ft, "teachers.finetune", "batch_size", int, default=32),
        )
    seed = _get(section, "teachers", "seed", int, default=0)
    return TeacherSetup(assignment=assignment, pool=tuple(pool), finetune=finetune, seed=seed)


def _parse_dataset(section: dict) -> DatasetRefs:
    _reject_unknown(section, "dataset", {"train", "test", "format", "synthetic"})
    if "synthetic" in section:
        syn = section["synthetic"]
        if not isinstance(syn, dict):
            raise ConfigError("dataset.synthetic: expected an object")
        _reject_unknown(
            syn,
            "dataset.synthetic",
            {"n_classes", "train_per_class", "test_per_class", "input_dim",
             "class_separation", "seed"},
        )
        spec = SyntheticSpec(
            n_classes=_get(syn, "dataset.synthetic", "n_classes", int, required=True),
            train_per_class=_get(syn, "dataset.synthetic", "train_per_class", int, required=True),
            test_per_class=_get(syn, "dataset.synthetic", "test_per_class", int, required=True),
            input_dim=_get(syn, "dataset.synthetic", "input_dim", int, required=True),
            class_separation=_get(
                syn, "dataset.synthetic", "class_separation", float, required=True
            ),
            seed=_get(syn, "dataset.synthetic", "seed", int, default=0),
        )
        return DatasetRefs(synthetic=spec)
    train = _get(section, "dataset", "train", str, required=True)
    test = _get(section, "dataset", "test", str, required=True)
    fmt = _get(section, "dataset", "format", str, default="csv")
    if fmt not in ("csv", "binary"):
        raise ConfigError(f"dataset.format: expected 'csv' or 'binary', got {fmt!r}")
    return DatasetRefs(train_path=train, test_path=test, format=fmt)


TOP_LEVEL_KEYS = {
    "algorithm", "seed", "rounds", "local_epochs", "batch_size", "base_lr",
    "weight_decay", "lr_milestone", "lr_factor", "client_fraction", "eval_every",
    "mu", "beta", "distill", "model", "partition", "teachers", "dataset",
}


def load_run_config(path) -> RunSetup:
    """Parse and validate a JSON run configuration.

    Unknown keys are rejected with their full key path; defaults for omitted
    optional keys are applied and echoed in ``RunSetup.resolved``.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    _reject_unknown(raw, "", TOP_LEVEL_KEYS)

    algorithm = _get(raw, "", "algorithm", str, required=True)
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm: expected one of {ALGORITHMS}, got {algorithm!r}")
    distill_section = raw.get("distill", {})
    if not isinstance(distill_section, dict):
        raise ConfigError("distill: expected an object")
    distill = _parse_distill(distill_section)
    if "dataset" not in raw or not isinstance(raw["dataset"], dict):
        raise ConfigError("dataset: missing required section")
    if "partition" not in raw or not isinstance(raw["partition"], dict):
        raise ConfigError("partition: missing required section")

    lr_milestone = raw.get("lr_milestone", 200)
    if lr_milestone is not None and (not isinstance(lr_milestone, int) or isinstance(lr_milestone, bool)):
        raise ConfigError(f"lr_milestone: expected int or null, got {_typename(lr_milestone)}")

    part = _parse_partition(raw["partition"])
    try:
        federation = FederationConfig(
            algorithm=algorithm,
            n_clients=part.n_clients,
            rounds=_get(raw, "", "rounds", int, default=100),
            local_epochs=_get(raw, "", "local_epochs", int, default=1),
            batch_size=_get(raw, "", "batch_size", int, default=32),
            base_lr=_get(raw, "", "base_lr", float, default=0.01),
            weight_decay=_get(raw, "", "weight_decay", float, default=5e-4),
            lr_milestone=lr_milestone,
            lr_factor=_get(raw, "", "lr_factor", float, default=0.1),
            client_fraction=_get(raw, "", "client_fraction", float, default=1.0),
            distill=distill,
            mu=_get(raw, "", "mu", float, default=0.01),
            beta=_get(raw, "", "beta", float, default=0.5),
            seed=_get(raw, "", "seed", int, default=0),
            eval_every=_get(raw, "", "eval_every", int, default=10),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    model_section = raw.get("model", {})
    if not isinstance(model_section, dict):
        raise ConfigError("model: expected an object")
    try:
        arch = _parse_model(model_section)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None

    teachers = None
    if "teachers" in raw:
        if not isinstance(raw["teachers"], dict):
            raise ConfigError("teachers: expected an object")
        teachers = _parse_teachers(raw["teachers"])
    if algorithm == "fed_lpfm" and distill.lam < 1.0 and teachers is None:
        raise ConfigError("teachers: required when algorithm is fed_lpfm and distill.lambda < 1")

    dataset = _parse_dataset(raw["dataset"])

    resolved = {
        "algorithm": federation.algorithm,
        "seed": federation.seed,
        "rounds": federation.rounds,
        "local_epochs": federation.local_epochs,
        "batch_size": federation.batch_size,
        "base_lr": federation.base_lr,
        "weight_decay": federation.weight_decay,
        "lr_milestone": federation.lr_milestone,
        "lr_factor": federation.lr_factor,
        "client_fraction": federation.client_fraction,
        "eval_every": federation.eval_every,
        "mu": federation.mu,
        "beta": federation.beta,
        "distill": {
            "lambda": distill.lam,
            "temperature": distill.temperature,
            "kl_direction": distill.kl_direction,
        },
        "model": {
            "hidden_dims": list(arch.hidden_dims),
            "norm": arch.norm,
            "groups": arch.groups,
        },
        "partition": {
            "kind": part.kind,
            "n_clients": part.n_clients,
            "seed": part.seed,
            "alpha": part.alpha,
            "classes_per_client": part.classes_per_client,
        },
        "teachers": None
        if teachers is None
        else {
            "assignment": teachers.assignment,
            "seed": teachers.seed,
            "pool": [
                {
                    "kind": src.kind,
                    **({"path": src.path} if src.path is not None else {}),
                    **(
                        {
                            "hidden_dims": list(src.hidden_dims),
                            "norm": src.norm,
                            "groups": src.groups,
                            "epochs": src.epochs,
                            "lr": src.lr,
                            "seed": src.seed,
                            "batch_size": src.batch_size,
                        }
                        if src.kind == "pretrain"
                        else {}
                    ),
                }
                for src in teachers.pool
            ],
            "finetune": None
            if teachers.finetune is None
            else {
                "epochs": teachers.finetune.epochs,
                "lr": teachers.finetune.lr,
                "batch_size": teachers.finetune.batch_size,
            },
        },
        "dataset": {
            "synthetic": None
            if dataset.synthetic is None
            else {
                "n_classes": dataset.synthetic.n_classes,
                "train_per_class": dataset.synthetic.train_per_class,
                "test_per_class": dataset.synthetic.test_per_class,
                "input_dim": dataset.synthetic.input_dim,
                "class_separation": dataset.synthetic.class_separation,
                "seed": dataset.synthetic.seed,
            },
            "train": dataset.train_path,
            "test": dataset.test_path,
            "format": dataset.format,
        },
    }
    return RunSetup(
        federation=federation,
        arch=arch,
        partition=part,
        teachers=teachers,
        dataset=dataset,
        resolved=resolved,
    )
