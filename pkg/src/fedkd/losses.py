"""Training losses: cross-entropy, multi-teacher KL distillation, their
weighted combination, a proximal parameter penalty, and the two-sided
mutual-learning objective.

All logit-space losses return both the scalar value (batch mean) and the
gradient with respect to the student logits; teacher distributions are always
treated as constants.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import ModelParams

__all__ = [
    "DistillConfig",
    "LossValueAndGrad",
    "softmax",
    "cross_entropy",
    "kl_distill",
    "combined_loss",
    "proximal_penalty",
    "mutual_learning_losses",
]


@dataclass(frozen=True)
class DistillConfig:
    """Mixing weight, softmax temperature and KL argument order.

    ``lam`` weighs cross-entropy against distillation: the combined objective
    is ``lam * CE + (1 - lam) * KL``. ``kl_direction`` picks which
    distribution is the first KL argument.
    """

    lam: float = 0.5
    temperature: float = 1.0
    kl_direction: str = "student_first"

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.kl_direction not in ("student_first", "teacher_first"):
            raise ValueError(
                "kl_direction must be 'student_first' or 'teacher_first', "
                f"got {self.kl_direction!r}"
            )


@dataclass(eq=False)
class LossValueAndGrad:
    value: float
    grad: np.ndarray


def _log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, max-subtracted for stability."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> LossValueAndGrad:
    """Mean negative log-likelihood; gradient is (softmax - onehot) / batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.size != n:
        raise ValueError(f"{n} logit rows but {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    logp = _log_softmax(logits)
    value = float(-logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return LossValueAndGrad(value, grad)


def kl_distill(
    student_logits: np.ndarray,
    teacher_logits_list: Sequence[np.ndarray],
    cfg: DistillConfig,
) -> LossValueAndGrad:
    """Summed-over-teachers, batch-mean KL between the temperature-softened
    student and teacher distributions.

    ``student_first`` computes KL(student || teacher); ``teacher_first`` the
    reverse. The gradient is taken with respect to the student logits only.
    """
    if len(teacher_logits_list) == 0:
        raise ValueError("teacher logits list is empty")
    s_logits = np.asarray(student_logits, dtype=np.float64)
    n, c = s_logits.shape
    t = cfg.temperature
    s_logp = _log_softmax(s_logits, t)
    s_prob = np.exp(s_logp)

    value = 0.0
    grad = np.zeros_like(s_logits)
    for teacher_logits in teacher_logits_list:
        t_logits = np.asarray(teacher_logits, dtype=np.float64)
        if t_logits.shape != s_logits.shape:
            raise ValueError(
                f"teacher logits shape {t_logits.shape} != student shape {s_logits.shape}"
            )
        t_logp = _log_softmax(t_logits, t)
        if cfg.kl_direction == "student_first":
            per_sample = (s_prob * (s_logp - t_logp)).sum(axis=1)
            grad += s_prob * ((s_logp - t_logp) - per_sample[:, None]) / (t * n)
        else:
            t_prob = np.exp(t_logp)
            per_sample = (t_prob * (t_logp - s_logp)).sum(axis=1)
            grad += (s_prob - t_prob) / (t * n)
        # KL is non-negative; guard against sign flips from rounding near 0.
        value += max(float(per_sample.mean()), 0.0)
    return LossValueAndGrad(value, grad)


def combined_loss(
    student_logits: np.ndarray,
    labels: np.ndarray,
    teacher_logits_list: Sequence[np.ndarray],
    cfg: DistillConfig,
) -> LossValueAndGrad:
    """lam * cross-entropy + (1 - lam) * KL distillation.

    The endpoints are exact: lam=1 returns the cross-entropy result itself
    and lam=0 the distillation result, bit for bit. An empty teacher list is
    allowed only at lam=1.
    """
    if cfg.lam == 1.0:
        return cross_entropy(student_logits, labels)
    if len(teacher_logits_list) == 0:
        raise ValueError("lambda < 1 requires at least one teacher")
    if cfg.lam == 0.0:
        return kl_distill(student_logits, teacher_logits_list, cfg)
    ce = cross_entropy(student_logits, labels)
    kd = kl_distill(student_logits, teacher_logits_list, cfg)
    value = cfg.lam * ce.value + (1.0 - cfg.lam) * kd.value
    grad = cfg.lam * ce.grad + (1.0 - cfg.lam) * kd.grad
    return LossValueAndGrad(value, grad)


def proximal_penalty(
    local: ModelParams, global_ref: ModelParams, mu: float
) -> tuple[float, np.ndarray]:
    """(mu/2) * ||local - global||^2 and its gradient mu * (local - global)."""
    if local.arch != global_ref.arch:
        raise ValueError("proximal penalty requires identical architectures")
    if mu < 0.0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if mu == 0.0:
        return 0.0, np.zeros_like(local.values)
    diff = local.values - global_ref.values
    return 0.5 * mu * float(diff @ diff), mu * diff


def mutual_learning_losses(
    proxy_logits: np.ndarray,
    private_logits: np.ndarray,
    labels: np.ndarray,
    beta: float,
) -> tuple[LossValueAndGrad, LossValueAndGrad]:
    """Two-sided mutual learning: each model minimizes
    beta * CE + (1 - beta) * KL(self || other) with the other side frozen.

    Returns (proxy, private) loss/grad pairs; each gradient is with respect
    to that model's own logits.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    proxy_logits = np.asarray(proxy_logits, dtype=np.float64)
    private_logits = np.asarray(private_logits, dtype=np.float64)
    if proxy_logits.shape != private_logits.shape:
        raise ValueError(
            f"proxy shape {proxy_logits.shape} != private shape {private_logits.shape}"
        )
    cfg = DistillConfig(lam=beta, temperature=1.0, kl_direction="student_first")
    proxy = combined_loss(proxy_logits, labels, [private_logits], cfg)
    private = combined_loss(private_logits, labels, [proxy_logits], cfg)
    return proxy, private
