"""Two-layer ReLU network with client-specific covariance normalization.

For a sample ``x`` owned by client ``i`` the network computes::

    f(x) = 1/sqrt(m) * sum_k c_k * relu(gamma[k, i] * v_k.x / ||v_k||_{S_i})

FedAvg corresponds to tying the columns of ``gamma``; FedBN lets every
client keep its own column. The top layer ``c`` is fixed after init.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TheoryParams:
    V: np.ndarray  # (m, d)
    gamma: np.ndarray  # (m, N)
    c: np.ndarray  # (m,), entries in {-1, +1}
    alpha: float

    @property
    def width(self) -> int:
        return self.V.shape[0]

    @property
    def n_clients(self) -> int:
        return self.gamma.shape[1]

    def copy(self) -> "TheoryParams":
        return TheoryParams(self.V.copy(), self.gamma.copy(), self.c.copy(), self.alpha)


@dataclass
class TheoryGrads:
    dV: np.ndarray
    dgamma: np.ndarray
    loss: float = field(default=float("nan"))


def init_theory(m: int, d: int, N: int, alpha: float, rng: np.random.Generator) -> TheoryParams:
    """``v_k ~ N(0, alpha^2 I)``, ``c_k`` uniform on {-1, 1}, ``gamma[k, :] = ||v_k|| / alpha``."""
    if m < 1 or d < 1 or N < 1:
        raise ValueError("m, d and N must be positive")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    V = alpha * rng.standard_normal((m, d))
    c = rng.choice(np.array([-1.0, 1.0]), size=m)
    g = np.linalg.norm(V, axis=1) / alpha
    gamma = np.repeat(g[:, None], N, axis=1)
    return TheoryParams(V=V, gamma=gamma, c=c, alpha=float(alpha))


def s_norms(V: np.ndarray, covs) -> np.ndarray:
    """``out[k, i] = ||v_k||_{S_i}`` for every neuron and client covariance."""
    S = np.stack([np.asarray(s, dtype=float) for s in covs])
    sq = np.einsum("kd,ide,ke->ki", V, S, V)
    if np.any(sq <= 0.0) or not np.all(np.isfinite(sq)):
        raise ValueError("zero weight vector or non positive-definite covariance")
    return np.sqrt(sq)


def projected_features(x: np.ndarray, v: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``(I - S v v^T / ||v||_S^2) x``, the part of ``x`` seen by the direction gradient."""
    Sv = S @ v
    return x - Sv * (v @ x) / (v @ Sv)


def _layer(p: TheoryParams, X: np.ndarray, client_ids: np.ndarray, covs):
    nrm = s_norms(p.V, covs)  # (m, N)
    pre = X @ p.V.T  # (n, m), v_k.x
    a = pre / nrm[:, client_ids].T  # normalized pre-activation
    z = a * p.gamma[:, client_ids].T
    return nrm, pre, a, z


def theory_predict(p: TheoryParams, X: np.ndarray, client_ids, covs) -> np.ndarray:
    """Network outputs for a batch whose row ``q`` belongs to client ``client_ids[q]``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    client_ids = np.asarray(client_ids, dtype=int)
    _, _, _, z = _layer(p, X, client_ids, covs)
    return np.maximum(z, 0.0) @ p.c / np.sqrt(p.width)


def theory_forward(p: TheoryParams, x: np.ndarray, i: int, covs) -> float:
    """Output for a single sample ``x`` of client ``i``."""
    return float(theory_predict(p, np.asarray(x, dtype=float)[None, :], [i], covs)[0])


def weighted_grads(
    p: TheoryParams,
    X: np.ndarray,
    client_ids,
    covs,
    weights: np.ndarray,
) -> TheoryGrads:
    """``sum_q weights[q] * d f(x_q) / d(V, gamma)``.

    Any loss of the form ``sum_q l(f_q)`` has gradient ``weighted_grads`` with
    ``weights = l'(f)``. ReLU uses the subgradient 1 at zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    client_ids = np.asarray(client_ids, dtype=int)
    weights = np.asarray(weights, dtype=float)
    m = p.width
    nrm, pre, a, z = _layer(p, X, client_ids, covs)
    act = (z >= 0.0).astype(float)
    scale = weights[:, None] * p.c[None, :] * act / np.sqrt(m)  # (n, m)

    dgamma = np.zeros_like(p.gamma)
    contrib = scale * a  # d z / d gamma = a
    for i in range(p.n_clients):
        mask = client_ids == i
        if mask.any():
            dgamma[:, i] = contrib[mask].sum(axis=0)

    # d z / d v_k = gamma / ||v_k||_S * (x - (v.x) S v / ||v||_S^2)
    coef = scale * p.gamma[:, client_ids].T / nrm[:, client_ids].T  # (n, m)
    dV = coef.T @ X
    S = np.stack([np.asarray(s, dtype=float) for s in covs])
    SV = np.einsum("ide,ke->ikd", S, p.V)  # (N, m, d)
    for i in range(p.n_clients):
        mask = client_ids == i
        if mask.any():
            w = (coef[mask] * pre[mask]).sum(axis=0) / nrm[:, i] ** 2
            dV -= w[:, None] * SV[i]
    return TheoryGrads(dV=dV, dgamma=dgamma)


def theory_grads(
    p: TheoryParams,
    X: np.ndarray,
    y: np.ndarray,
    client_ids,
    covs,
    tie_gamma: bool = False,
) -> TheoryGrads:
    """Gradients of the mean squared loss ``mean((f - y)^2)`` over the batch.

    With ``tie_gamma`` (FedAvg) the gamma gradient is summed across clients and
    the sum is written into every column, so tied columns stay tied.
    """
    y = np.asarray(y, dtype=float)
    f = theory_predict(p, X, client_ids, covs)
    r = f - y
    g = weighted_grads(p, X, client_ids, covs, 2.0 * r / r.size)
    if tie_gamma:
        g.dgamma = np.repeat(g.dgamma.sum(axis=1, keepdims=True), p.n_clients, axis=1)
    g.loss = float(np.mean(r * r))
    return g
