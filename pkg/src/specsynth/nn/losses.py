"""Training losses, all differentiable through the Tensor graph."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = [
    "bce_with_logits",
    "nll_loss",
    "cross_entropy",
    "mse_loss",
    "distillation_loss",
]

LOGIT_CLAMP = 30.0


def bce_with_logits(logits: Tensor, targets, clamp: float = LOGIT_CLAMP) -> Tensor:
    """Mean binary cross-entropy on raw logits, numerically stable.

    Logits are clamped to +/-clamp before the loss so a saturated
    discriminator cannot produce infinities.
    """
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    clipped = np.clip(x, -clamp, clamp)
    # stable form: max(x,0) - x*t + log(1 + exp(-|x|))
    loss = np.maximum(clipped, 0) - clipped * t + np.log1p(np.exp(-np.abs(clipped)))
    out = loss.mean()

    def backward(g):
        if logits.requires_grad:
            inside = (x > -clamp) & (x < clamp)
            grad = (1.0 / (1.0 + np.exp(-clipped)) - t) * inside / t.size
            logits._accumulate(g * grad)

    return Tensor._make(np.asarray(out), (logits,), backward)


def nll_loss(log_probs: Tensor, targets) -> Tensor:
    """Mean negative log likelihood of integer targets under log-probability rows."""
    idx = np.asarray(targets, dtype=np.int64)
    if log_probs.ndim != 2 or idx.ndim != 1 or idx.shape[0] != log_probs.shape[0]:
        raise ValueError(f"nll_loss expects (B, C) log-probs and (B,) targets, got {log_probs.shape} / {idx.shape}")
    n = idx.shape[0]
    if n == 0:
        raise ValueError("nll_loss on an empty batch")
    picked = log_probs.data[np.arange(n), idx]
    out = -picked.mean()

    def backward(g):
        if log_probs.requires_grad:
            grad = np.zeros_like(log_probs.data)
            grad[np.arange(n), idx] = -1.0 / n
            log_probs._accumulate(g * grad)

    return Tensor._make(np.asarray(out), (log_probs,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Softmax cross-entropy from raw logits (log-softmax then NLL)."""
    return nll_loss(logits.log_softmax(axis=-1), targets)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    return ((pred - target) ** 2).mean()


def distillation_loss(student_logits: Tensor, teacher_probs, temperature: float = 2.0,
                      hard_targets=None, hard_weight: float = 0.0) -> Tensor:
    """KL(teacher_T || student_T) scaled by T^2, optionally mixed with hard-label CE.

    ``teacher_probs`` rows must sum to 1 within 1e-4. Temperature softening is
    applied to the teacher in log space (p^(1/T) renormalised) and to the
    student by dividing logits by T.
    """
    p = np.asarray(teacher_probs, dtype=np.float64)
    if p.shape != student_logits.shape:
        raise ValueError(f"teacher distribution shape {p.shape} != student logits {student_logits.shape}")
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("teacher rows must sum to 1 within 1e-4")
    t = float(temperature)
    log_p = np.log(np.clip(p, 1e-12, None)) / t
    log_p = log_p - np.log(np.exp(log_p - log_p.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) \
        - log_p.max(axis=1, keepdims=True)
    p_t = np.exp(log_p)
    student_log_t = (student_logits * (1.0 / t)).log_softmax(axis=-1)
    # constant teacher entropy term keeps the value a true KL, not just CE
    kl = (Tensor(p_t * log_p).sum() - (student_log_t * Tensor(p_t)).sum()) * (t * t / p.shape[0])
    if hard_weight > 0.0:
        if hard_targets is None:
            raise ValueError("hard_weight > 0 requires hard_targets")
        return kl * (1.0 - hard_weight) + cross_entropy(student_logits, hard_targets) * hard_weight
    return kl
