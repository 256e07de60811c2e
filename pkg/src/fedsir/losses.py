"""Classification losses with analytic logit gradients.

All losses accept a single logit vector ``(C,)`` or a batch ``(B, C)``; batch
losses are averaged and the returned gradient is that of the mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LAConfig:
    beta: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 2.0
    kd_weight: float = 0.5
    # multiply the KL term by temperature**2 (Hinton convention); off by default
    scale_by_t2: bool = False

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.kd_weight <= 1.0:
            raise ValueError("kd_weight must lie in [0, 1]")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def class_priors(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Empirical label distribution pi_c = n_c / N."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("class priors need at least one sample")
    return np.bincount(labels, minlength=num_classes) / labels.size


def logit_adjustment(priors: np.ndarray, la: LAConfig) -> np.ndarray:
    """Per-class margin beta * ln(pi_c + eps); finite even for absent classes."""
    return la.beta * np.log(np.asarray(priors, dtype=float) + la.epsilon)


def _as_batch(logits: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray, bool]:
    logits = np.asarray(logits, dtype=float)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("one label per logit row required")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    return logits, labels, single


def loss_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Cross-entropy -log softmax(logits)[label]; gradient softmax - onehot."""
    z, y, single = _as_batch(logits, labels)
    b = z.shape[0]
    logp = log_softmax(z)
    loss = -logp[np.arange(b), y].mean()
    grad = np.exp(logp)
    grad[np.arange(b), y] -= 1.0
    grad /= b
    return float(loss), grad[0] if single else grad


def loss_la(logits: np.ndarray, margin: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Logit-adjusted cross-entropy: CE on ``logits + margin``."""
    return loss_ce(np.asarray(logits, dtype=float) + margin, labels)


def loss_la_kd(
    student_logits: np.ndarray,
    margin: np.ndarray,
    teacher_logits: np.ndarray,
    labels,
    kd: KDConfig,
) -> tuple[float, np.ndarray]:
    """Hybrid distillation loss ``w * KL(p || q) + (1 - w) * NLL(log q, y)``.

    ``p = softmax(teacher / tau)`` is the softened teacher distribution and
    ``q = softmax(student + margin)`` the adjusted student distribution at
    temperature 1. The teacher is treated as a constant.
    """
    s, y, single = _as_batch(student_logits, labels)
    t = np.asarray(teacher_logits, dtype=float)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape != s.shape:
        raise ValueError("teacher and student logits must have the same shape")
    b = s.shape[0]
    w = kd.kd_weight
    scale = kd.temperature**2 if kd.scale_by_t2 else 1.0

    log_q = log_softmax(s + margin)
    q = np.exp(log_q)
    log_p = log_softmax(t / kd.temperature)
    p = np.exp(log_p)

    kl = (p * (log_p - log_q)).sum(axis=1)
    nll = -log_q[np.arange(b), y]
    loss = (w * scale * kl + (1.0 - w) * nll).mean()

    onehot = np.zeros_like(q)
    onehot[np.arange(b), y] = 1.0
    grad = (w * scale * (q - p) + (1.0 - w) * (q - onehot)) / b
    return float(loss), grad[0] if single else grad


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))
