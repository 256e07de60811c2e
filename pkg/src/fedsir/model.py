"""Two-layer ReLU feature extractor with a linear head, trained with numpy.

Parameters live in one flat ``float64`` vector so that aggregation, distances
and averaging are plain vector arithmetic. :class:`MLP` knows the layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from fedsir import losses
from fedsir.losses import KDConfig
from fedsir.seeding import derive_rng


class ForwardOutput(NamedTuple):
    features: np.ndarray
    logits: np.ndarray


class LossKind(str, Enum):
    CE = "ce"
    LA = "la"
    LA_KD = "la_kd"


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 1
    learning_rate: float = 3e-4
    weight_decay: float = 5e-4
    batch_size: int = 32
    optimizer: str = "adam"
    momentum: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        # lr == 0 is accepted as an explicit null step
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class LossAux:
    """Extra inputs a loss needs: LA margins, and for LA-KD the frozen teacher."""

    margin: np.ndarray | None = None
    teacher_params: np.ndarray | None = None
    kd: KDConfig = field(default_factory=KDConfig)


@dataclass(frozen=True)
class MLP:
    """``d_in -> hidden -> feature`` (ReLU after each) followed by ``feature -> C``."""

    input_dim: int = 32
    hidden_dim: int = 64
    feature_dim: int = 16
    num_classes: int = 10

    @property
    def _shapes(self) -> list[tuple[int, ...]]:
        return [
            (self.input_dim, self.hidden_dim),
            (self.hidden_dim,),
            (self.hidden_dim, self.feature_dim),
            (self.feature_dim,),
            (self.feature_dim, self.num_classes),
            (self.num_classes,),
        ]

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self._shapes))

    def unpack(self, params: np.ndarray) -> list[np.ndarray]:
        """Views ``[W1, b1, W2, b2, W3, b3]`` into ``params`` (weights are ``in x out``)."""
        if params.shape != (self.num_params,):
            raise ValueError(f"expected {self.num_params} parameters, got {params.shape}")
        out, start = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(params[start : start + size].reshape(shape))
            start += size
        return out

    def pack(self, parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def init_params(self, seed: int) -> np.ndarray:
        """He-normal weights, zero biases."""
        rng = derive_rng(seed, "init")
        parts = []
        for shape in self._shapes:
            if len(shape) == 2:
                parts.append(rng.standard_normal(shape) * np.sqrt(2.0 / shape[0]))
            else:
                parts.append(np.zeros(shape))
        return self.pack(parts)

    def _check_inputs(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.input_dim}")
        return x

    def forward(self, params: np.ndarray, x: np.ndarray) -> ForwardOutput:
        """Features (post-ReLU, pre-head) and logits for one input or a batch."""
        x = self._check_inputs(x)
        w1, b1, w2, b2, w3, b3 = self.unpack(params)
        h = np.maximum(x @ w1 + b1, 0.0)
        z = np.maximum(h @ w2 + b2, 0.0)
        return ForwardOutput(z, z @ w3 + b3)

    def features(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x).features

    def logits(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x).logits

    def loss_and_grad(self, params: np.ndarray, x: np.ndarray, loss_fn) -> tuple[float, np.ndarray]:
        """Backpropagate ``loss_fn(logits) -> (loss, dloss/dlogits)`` to a flat gradient."""
        x = self._check_inputs(x)
        w1, b1, w2, b2, w3, b3 = self.unpack(params)
        a1 = x @ w1 + b1
        h = np.maximum(a1, 0.0)
        a2 = h @ w2 + b2
        z = np.maximum(a2, 0.0)
        loss, g_logits = loss_fn(z @ w3 + b3)

        g_w3 = z.T @ g_logits
        g_b3 = g_logits.sum(axis=0)
        g_a2 = (g_logits @ w3.T) * (a2 > 0)
        g_w2 = h.T @ g_a2
        g_b2 = g_a2.sum(axis=0)
        g_a1 = (g_a2 @ w2.T) * (a1 > 0)
        g_w1 = x.T @ g_a1
        g_b1 = g_a1.sum(axis=0)
        return loss, self.pack([g_w1, g_b1, g_w2, g_b2, g_w3, g_b3])

    def predict(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(params, x), axis=-1)

    def accuracy(self, params: np.ndarray, x: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(params, x) == labels))


def _batch_loss(kind: LossKind, labels: np.ndarray, aux: LossAux, teacher_logits: np.ndarray | None):
    if kind is LossKind.CE:
        return lambda logits: losses.loss_ce(logits, labels)
    if aux.margin is None:
        raise ValueError(f"{kind.value} loss needs LA margins")
    if kind is LossKind.LA:
        return lambda logits: losses.loss_la(logits, aux.margin, labels)
    return lambda logits: losses.loss_la_kd(logits, aux.margin, teacher_logits, labels, aux.kd)


def mean_loss(
    mlp: MLP,
    params: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    kind: LossKind = LossKind.CE,
    aux: LossAux | None = None,
) -> float:
    aux = aux or LossAux()
    teacher = mlp.logits(aux.teacher_params, inputs) if kind is LossKind.LA_KD else None
    return _batch_loss(LossKind(kind), labels, aux, teacher)(mlp.logits(params, inputs))[0]


def local_train(
    mlp: MLP,
    params: np.ndarray,
    inputs: np.ndarray,
    labels: np.ndarray,
    cfg: LocalTrainConfig,
    kind: LossKind = LossKind.CE,
    aux: LossAux | None = None,
) -> np.ndarray:
    """Run ``cfg.epochs`` of mini-batch training and return new parameters.

    Weight decay is coupled L2 (added to the gradient), as in ``torch.optim.Adam``.
    Optimizer state starts fresh on every call.
    """
    kind = LossKind(kind)
    aux = aux or LossAux()
    if kind is LossKind.LA_KD and aux.teacher_params is None:
        raise ValueError("la_kd loss needs teacher parameters")
    labels = np.asarray(labels, dtype=np.int64)
    teacher_logits = mlp.logits(aux.teacher_params, inputs) if kind is LossKind.LA_KD else None

    theta = np.array(params, dtype=float, copy=True)
    if cfg.learning_rate == 0:
        return theta
    rng = derive_rng(cfg.rng_seed, "local-train")
    n = inputs.shape[0]
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            t_batch = None if teacher_logits is None else teacher_logits[idx]
            fn = _batch_loss(kind, labels[idx], aux, t_batch)
            _, grad = mlp.loss_and_grad(theta, inputs[idx], fn)
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * theta
            step += 1
            if cfg.optimizer == "adam":
                m = beta1 * m + (1 - beta1) * grad
                v = beta2 * v + (1 - beta2) * grad * grad
                m_hat = m / (1 - beta1**step)
                v_hat = v / (1 - beta2**step)
                theta = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            else:
                m = cfg.momentum * m + grad
                theta = theta - cfg.learning_rate * m
    return theta
