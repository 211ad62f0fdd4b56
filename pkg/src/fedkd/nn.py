"""Dense feedforward classifier with explicit forward/backward passes.

All parameters of a model live in one flat float64 vector. Canonical layout,
layer by layer from input to output: weight matrix (fan_in x fan_out,
row-major), then bias, then for normalized hidden layers the per-feature
scale and shift of the group norm. Hidden layers compute
linear -> group norm (when configured) -> ReLU; the output layer is purely
affine and yields class logits.

Every operation here is a pure function of its inputs: identical inputs give
bit-identical outputs, and nothing is mutated in place.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GROUP_NORM_EPS",
    "ArchDescriptor",
    "ModelParams",
    "OptimizerState",
    "Batch",
    "init_params",
    "forward",
    "backward",
    "sgd_step",
]

GROUP_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ArchDescriptor:
    """Shape of a feedforward classifier.

    ``norm`` is either ``"none"`` or ``"group"``; with group norm every
    hidden width must be divisible by ``groups``. The output layer is never
    normalized.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    norm: str = "none"
    groups: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.norm not in ("none", "group"):
            raise ValueError(f"norm must be 'none' or 'group', got {self.norm!r}")
        if self.norm == "group":
            if self.groups < 1:
                raise ValueError(f"groups must be positive, got {self.groups}")
            for h in self.hidden_dims:
                if h % self.groups != 0:
                    raise ValueError(
                        f"hidden dim {h} is not divisible by {self.groups} norm groups"
                    )

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def param_count(self) -> int:
        dims = self.dims
        count = 0
        for i in range(self.n_layers):
            count += dims[i] * dims[i + 1] + dims[i + 1]
            if self.norm == "group" and i < self.n_layers - 1:
                count += 2 * dims[i + 1]
        return count


@dataclass(frozen=True)
class _LayerSlot:
    """Offsets of one layer's parameters inside the flat vector."""

    fan_in: int
    fan_out: int
    w: slice
    b: slice
    gamma: slice | None = None
    beta: slice | None = None


def _layer_slots(arch: ArchDescriptor) -> list[_LayerSlot]:
    dims = arch.dims
    slots = []
    off = 0
    for i in range(arch.n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = slice(off, off + fan_in * fan_out)
        off = w.stop
        b = slice(off, off + fan_out)
        off = b.stop
        gamma = beta = None
        if arch.norm == "group" and i < arch.n_layers - 1:
            gamma = slice(off, off + fan_out)
            off = gamma.stop
            beta = slice(off, off + fan_out)
            off = beta.stop
        slots.append(_LayerSlot(fan_in, fan_out, w, b, gamma, beta))
    return slots


@dataclass(eq=False)
class ModelParams:
    """Architecture plus one flat float64 parameter vector."""

    arch: ArchDescriptor
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        expected = self.arch.param_count()
        if self.values.size != expected:
            raise ValueError(
                f"parameter vector has {self.values.size} entries, "
                f"architecture implies {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise ValueError(f"non-finite parameter at index {bad}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.values.copy())


@dataclass(frozen=True)
class OptimizerState:
    """Plain SGD with decoupled-from-nothing weight decay and a step schedule.

    The effective learning rate after k passed milestones is
    ``learning_rate * factor**k``.
    """

    learning_rate: float
    weight_decay: float = 0.0
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self) -> None:
        # Zero is allowed so a "no movement" update stays expressible.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def lr_at(self, round_index: int) -> float:
        passed = sum(1 for m in self.milestones if round_index >= m)
        return self.learning_rate * self.factor**passed


@dataclass(eq=False)
class Batch:
    """A minibatch of inputs and integer class labels.

    ``example_ids`` is carried along so that table-backed teachers can look
    examples up; model-backed consumers ignore it.
    """

    inputs: np.ndarray
    labels: np.ndarray
    example_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {self.inputs.shape}")
        if self.inputs.shape[0] != self.labels.size:
            raise ValueError(
                f"{self.inputs.shape[0]} input rows but {self.labels.size} labels"
            )
        if self.inputs.shape[0] < 1:
            raise ValueError("batch must contain at least one example")
        if self.example_ids is not None:
            self.example_ids = np.asarray(self.example_ids, dtype=np.int64).reshape(-1)
            if self.example_ids.size != self.labels.size:
                raise ValueError(
                    f"{self.example_ids.size} example ids but {self.labels.size} labels"
                )

    @property
    def size(self) -> int:
        return self.labels.size


def init_params(arch: ArchDescriptor, seed: int) -> ModelParams:
    """Deterministic initialization: weights uniform in +-sqrt(6/(fan_in+fan_out)),
    biases and norm shifts zero, norm scales one.

    The generator is consumed only by the weight matrices, in layer order, so
    (arch, seed) pins every bit of the result.
    """
    rng = np.random.default_rng(seed)
    values = np.zeros(arch.param_count(), dtype=np.float64)
    for slot in _layer_slots(arch):
        bound = np.sqrt(6.0 / (slot.fan_in + slot.fan_out))
        values[slot.w] = rng.uniform(-bound, bound, size=slot.fan_in * slot.fan_out)
        if slot.gamma is not None:
            values[slot.gamma] = 1.0
    return ModelParams(arch, values)


def _group_norm_forward(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray, groups: int):
    n, d = z.shape
    m = d // groups
    zg = z.reshape(n, groups, m)
    mean = zg.mean(axis=2, keepdims=True)
    var = zg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + GROUP_NORM_EPS)
    x_hat = ((zg - mean) * inv_std).reshape(n, d)
    out = x_hat * gamma + beta
    return out, x_hat, inv_std


def _group_norm_backward(
    g_out: np.ndarray,
    x_hat: np.ndarray,
    inv_std: np.ndarray,
    gamma: np.ndarray,
    groups: int,
):
    n, d = g_out.shape
    m = d // groups
    g_gamma = (g_out * x_hat).sum(axis=0)
    g_beta = g_out.sum(axis=0)
    gxh = (g_out * gamma).reshape(n, groups, m)
    xh = x_hat.reshape(n, groups, m)
    # d/dz of (z - mean)/std, folding the mean and variance paths.
    g_z = inv_std * (gxh - gxh.mean(axis=2, keepdims=True) - xh * (gxh * xh).mean(axis=2, keepdims=True))
    return g_z.reshape(n, d), g_gamma, g_beta


def _forward_cached(params: ModelParams, inputs: np.ndarray):
    arch = params.arch
    slots = _layer_slots(arch)
    values = params.values
    caches = []
    x = inputs
    for i, slot in enumerate(slots):
        w = values[slot.w].reshape(slot.fan_in, slot.fan_out)
        b = values[slot.b]
        z = x @ w + b
        if i == arch.n_layers - 1:
            caches.append({"x": x})
            return z, caches, slots
        if slot.gamma is not None:
            gamma = values[slot.gamma]
            beta = values[slot.beta]
            pre_act, x_hat, inv_std = _group_norm_forward(z, gamma, beta, arch.groups)
            caches.append({"x": x, "x_hat": x_hat, "inv_std": inv_std, "pre_act": pre_act})
        else:
            pre_act = z
            caches.append({"x": x, "pre_act": pre_act})
        x = np.maximum(pre_act, 0.0)
    raise AssertionError("unreachable")


def forward(params: ModelParams, batch: Batch) -> np.ndarray:
    """Logits for a batch, shape (batch_size, num_classes)."""
    if batch.inputs.shape[1] != params.arch.input_dim:
        raise ValueError(
            f"batch has {batch.inputs.shape[1]} features, "
            f"model expects {params.arch.input_dim}"
        )
    logits, _, _ = _forward_cached(params, batch.inputs)
    return logits


def backward(params: ModelParams, batch: Batch, loss_grad_wrt_logits: np.ndarray) -> np.ndarray:
    """Exact gradient of ``sum(logits * loss_grad_wrt_logits)`` w.r.t. the
    flat parameter vector.

    Recomputes the forward pass internally; the upstream gradient must have
    shape (batch_size, num_classes).
    """
    arch = params.arch
    g_up = np.asarray(loss_grad_wrt_logits, dtype=np.float64)
    if g_up.shape != (batch.size, arch.num_classes):
        raise ValueError(
            f"upstream gradient has shape {g_up.shape}, "
            f"expected {(batch.size, arch.num_classes)}"
        )
    if batch.inputs.shape[1] != arch.input_dim:
        raise ValueError(
            f"batch has {batch.inputs.shape[1]} features, model expects {arch.input_dim}"
        )

    _, caches, slots = _forward_cached(params, batch.inputs)
    values = params.values
    grads = np.zeros_like(values)

    g = g_up
    for i in range(arch.n_layers - 1, -1, -1):
        slot = slots[i]
        cache = caches[i]
        if i < arch.n_layers - 1:
            g = g * (cache["pre_act"] > 0.0)
            if slot.gamma is not None:
                g, g_gamma, g_beta = _group_norm_backward(
                    g, cache["x_hat"], cache["inv_std"], values[slot.gamma], arch.groups
                )
                grads[slot.gamma] = g_gamma
                grads[slot.beta] = g_beta
        w = values[slot.w].reshape(slot.fan_in, slot.fan_out)
        grads[slot.w] = (cache["x"].T @ g).reshape(-1)
        grads[slot.b] = g.sum(axis=0)
        if i > 0:
            g = g @ w.T
    return grads


def sgd_step(
    params: ModelParams,
    grads: np.ndarray,
    opt: OptimizerState,
    round_index: int,
) -> ModelParams:
    """One SGD update: values - lr(round) * (grads + weight_decay * values)."""
    grads = np.asarray(grads, dtype=np.float64).reshape(-1)
    if grads.size != params.values.size:
        raise ValueError(
            f"gradient has {grads.size} entries, parameters have {params.values.size}"
        )
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise ValueError(f"non-finite gradient at index {bad}")
    lr = opt.lr_at(round_index)
    if lr == 0.0:
        return params.copy()
    if opt.weight_decay != 0.0:
        step = grads + opt.weight_decay * params.values
    else:
        step = grads
    return ModelParams(params.arch, params.values - lr * step)
