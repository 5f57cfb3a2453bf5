"""Layer-tagged MLP with batch normalization and hand-written backprop.

A network is an ordered list of :class:`Dense` and :class:`BatchNorm`
layers. A ReLU follows every BatchNorm layer. Forward passes are pure:
training-mode batch statistics are returned to the caller, who folds them
into the running estimates with :func:`update_running_stats`.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Union

import numpy as np

TRAIN = "train"
EVAL = "eval"
CROSS_ENTROPY = "cross_entropy"
SQUARED = "squared"


@dataclass
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    tag = "Dense"
    trainable = ("W", "b")
    state = ()

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    tag = "BatchNorm"
    trainable = ("gamma", "beta")
    state = ("running_mean", "running_var")

    @classmethod
    def fresh(cls, n: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNorm":
        return cls(np.ones(n), np.zeros(n), np.zeros(n), np.ones(n), momentum, epsilon)

    @property
    def in_dim(self) -> int:
        return self.gamma.shape[0]

    out_dim = in_dim


Layer = Union[Dense, BatchNorm]


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and np.any(layer.running_var <= 0):
                raise ValueError("running_var must be positive")

    def copy(self) -> "MlpParams":
        return copy.deepcopy(self)

    def arrays(self, include_state: bool = True):
        """Yield ``(layer_index, name, array, is_bn)`` for every parameter array."""
        for li, layer in enumerate(self.layers):
            names = layer.trainable + (layer.state if include_state else ())
            for name in names:
                yield li, name, getattr(layer, name), isinstance(layer, BatchNorm)


@dataclass
class MlpGrads:
    """Gradients keyed by ``(layer_index, name)``, plus the batch statistics
    observed by each BatchNorm layer during the forward pass."""

    grads: dict[tuple[int, str], np.ndarray]
    batch_stats: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    loss: float = float("nan")


def init_mlp(
    d: int,
    hidden: int,
    n_out: int,
    alpha: float,
    rng: np.random.Generator,
    momentum: float = 0.1,
    epsilon: float = 1e-5,
) -> MlpParams:
    """Dense(d, hidden) -> BN -> ReLU -> Dense(hidden, n_out).

    Every dense weight and bias is drawn from ``N(0, alpha^2)``.
    """
    W1 = alpha * rng.standard_normal((hidden, d))
    b1 = alpha * rng.standard_normal(hidden)
    W2 = alpha * rng.standard_normal((n_out, hidden))
    b2 = alpha * rng.standard_normal(n_out)
    return MlpParams([
        Dense(W1, b1),
        BatchNorm.fresh(hidden, momentum, epsilon),
        Dense(W2, b2),
    ])


def _forward(p: MlpParams, X: np.ndarray, mode: str):
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"unknown mode {mode!r}")
    h = np.atleast_2d(np.asarray(X, dtype=float))
    if mode == TRAIN and h.shape[0] < 2:
        raise ValueError("training-mode batch norm needs a batch of at least 2 samples")
    caches = []
    stats = {}
    for li, layer in enumerate(p.layers):
        if isinstance(layer, Dense):
            caches.append(h)
            h = h @ layer.W.T + layer.b
        else:
            if mode == TRAIN:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
                stats[li] = (mu, var, h.shape[0])
            else:
                mu, var = layer.running_mean, layer.running_var
            inv_std = 1.0 / np.sqrt(var + layer.epsilon)
            xhat = (h - mu) * inv_std
            out = layer.gamma * xhat + layer.beta
            caches.append((xhat, inv_std, out))
            h = np.maximum(out, 0.0)
    return h, caches, stats


def mlp_forward(p: MlpParams, X: np.ndarray, mode: str = EVAL) -> np.ndarray:
    """Logits for batch ``X``. Train mode normalizes with batch statistics."""
    return _forward(p, X, mode)[0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_dlogits(logits: np.ndarray, labels: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient with respect to the logits."""
    n = logits.shape[0]
    if loss == CROSS_ENTROPY:
        y = np.asarray(labels).astype(int)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        value = -float(logp[np.arange(n), y].mean())
        d = np.exp(logp)
        d[np.arange(n), y] -= 1.0
        return value, d / n
    if loss == SQUARED:
        target = np.asarray(labels, dtype=float)
        if logits.shape[1] == 1:
            target = target.reshape(n, 1)
        else:
            target = np.eye(logits.shape[1])[target.astype(int)]
        r = logits - target
        return float((r * r).sum(axis=1).mean()), 2.0 * r / n
    raise ValueError(f"unknown loss {loss!r}")


def predict_labels(logits: np.ndarray) -> np.ndarray:
    if logits.shape[1] == 1:
        return (logits[:, 0] >= 0.5).astype(float)
    return logits.argmax(axis=1).astype(float)


def mlp_backward(p: MlpParams, X: np.ndarray, labels: np.ndarray, loss: str = CROSS_ENTROPY) -> MlpGrads:
    """Training-mode forward pass followed by backprop of the batch-mean loss."""
    logits, caches, stats = _forward(p, X, TRAIN)
    value, g = loss_and_dlogits(logits, labels, loss)
    grads: dict[tuple[int, str], np.ndarray] = {}
    for li in range(len(p.layers) - 1, -1, -1):
        layer = p.layers[li]
        if isinstance(layer, Dense):
            h_in = caches[li]
            grads[(li, "W")] = g.T @ h_in
            grads[(li, "b")] = g.sum(axis=0)
            g = g @ layer.W
        else:
            xhat, inv_std, out = caches[li]
            g = g * (out > 0.0)
            grads[(li, "gamma")] = (g * xhat).sum(axis=0)
            grads[(li, "beta")] = g.sum(axis=0)
            gx = g * layer.gamma
            n = gx.shape[0]
            g = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
    batch_stats = {li: (mu, var * n / (n - 1)) for li, (mu, var, n) in stats.items()}
    return MlpGrads(grads=grads, batch_stats=batch_stats, loss=value)


def update_running_stats(p: MlpParams, batch_stats: dict[int, tuple[np.ndarray, np.ndarray]]) -> None:
    """Exponential moving average of batch mean and unbiased batch variance, in place."""
    for li, (mu, var) in batch_stats.items():
        layer = p.layers[li]
        mom = layer.momentum
        layer.running_mean = (1.0 - mom) * layer.running_mean + mom * mu
        layer.running_var = (1.0 - mom) * layer.running_var + mom * var


def recompute_running_stats(p: MlpParams, X: np.ndarray) -> None:
    """Replace running statistics by the statistics of ``X`` itself, in place.

    Uses one training-mode pass and the population variance, so eval-mode
    outputs on ``X`` afterwards equal training-mode outputs on ``X``.
    """
    _, _, stats = _forward(p, X, TRAIN)
    for li, (mu, var, _) in stats.items():
        p.layers[li].running_mean = mu.copy()
        p.layers[li].running_var = var.copy()
