"""Gram matrices of the gradient-descent dynamics of the theory network.

Throughout this module the training objective is the plain sum
``0.5 * ||f - y||^2`` over all ``NM`` samples, for which the prediction
dynamics are exactly ``df/dt = -Lambda (f - y)`` with
``Lambda = V / alpha^2 + G``. The engine's mean loss differs from it by a
constant factor that can be folded into the learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model.theory import TheoryParams, s_norms, theory_predict, weighted_grads
from .numerics import sym_eig_min, sym_eigvals, write_matrix_csv

GAVG = "Gavg"
GBN = "Gbn"
VAVG = "Vavg"
VBN = "Vbn"
LAMBDA = "Lambda"
LAMBDA_BN = "LambdaBn"

_MC_CHUNK = 20_000


@dataclass
class GramMatrix:
    entries: np.ndarray
    client_ids: np.ndarray  # client owning row p, ascending
    variant: str

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=float)
        self.client_ids = np.asarray(self.client_ids, dtype=int)
        n = self.client_ids.size
        if self.entries.shape != (n, n):
            raise ValueError(f"entries shape {self.entries.shape} does not match {n} samples")
        check_sample_order(self.client_ids)

    @property
    def size(self) -> int:
        return self.client_ids.size

    @property
    def local_index(self) -> np.ndarray:
        """Position of each row within its client's block."""
        out = np.zeros(self.size, dtype=int)
        for i in np.unique(self.client_ids):
            mask = self.client_ids == i
            out[mask] = np.arange(mask.sum())
        return out

    def block(self, i: int) -> np.ndarray:
        mask = self.client_ids == i
        return self.entries[np.ix_(mask, mask)]

    def lambda_min(self) -> float:
        return sym_eig_min(self.entries)

    def write_csv(self, path) -> None:
        write_matrix_csv(path, self.entries)


def check_sample_order(client_ids: np.ndarray) -> None:
    if np.any(np.diff(client_ids) < 0):
        raise ValueError("samples must be grouped by client in ascending client order")


def same_client_mask(client_ids: np.ndarray) -> np.ndarray:
    return client_ids[:, None] == client_ids[None, :]


def _magnitude_features(p: TheoryParams, X, client_ids, covs) -> np.ndarray:
    # A[p, k] = c_k * relu(v_k.x_p) / ||v_k||_{S_{i_p}}
    nrm = s_norms(p.V, covs)
    pre = X @ p.V.T
    return p.c[None, :] * np.maximum(pre, 0.0) / nrm[:, client_ids].T


def _direction_features(p: TheoryParams, X, client_ids, covs) -> np.ndarray:
    # Q[p, k, :] = alpha c_k gamma_{k, i_p} / ||v_k||_{S_{i_p}} * x_p^perp * 1{v_k.x_p >= 0}
    nrm = s_norms(p.V, covs)
    pre = X @ p.V.T  # (n, m)
    S = np.stack([np.asarray(s, dtype=float) for s in covs])
    SV = np.einsum("ide,ke->ikd", S, p.V)  # (N, m, d)
    coef = (
        p.alpha * p.c[None, :] * p.gamma[:, client_ids].T / nrm[:, client_ids].T
        * (pre >= 0.0)
    )  # (n, m)
    shift = (pre / nrm[:, client_ids].T ** 2)[:, :, None] * SV[client_ids]  # (n, m, d)
    perp = X[:, None, :] - shift
    return coef[:, :, None] * perp


def gram_finite(p: TheoryParams, X: np.ndarray, client_ids, covs, variant: str) -> GramMatrix:
    """Finite-width Gram matrix at the current parameters.

    ``Gavg``/``Gbn`` are the magnitude (gamma) parts; ``Gbn`` zeroes entries
    between samples of different clients. ``Vavg``/``Vbn`` are the direction
    (V) parts scaled by ``alpha^2``; they use ``gamma[k, i_p]``, and
    ``Vavg`` requires tied gamma columns.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    client_ids = np.asarray(client_ids, dtype=int)
    check_sample_order(client_ids)
    m = p.width
    if variant in (GAVG, GBN):
        A = _magnitude_features(p, X, client_ids, covs)
        G = A @ A.T / m
        if variant == GBN:
            G = np.where(same_client_mask(client_ids), G, 0.0)
        return GramMatrix(G, client_ids, variant)
    if variant in (VAVG, VBN):
        if variant == VAVG and not np.all(p.gamma == p.gamma[:, :1]):
            raise ValueError("Vavg needs tied gamma columns (FedAvg parameterization)")
        Q = _direction_features(p, X, client_ids, covs).reshape(X.shape[0], -1)
        return GramMatrix(Q @ Q.T / m, client_ids, variant)
    raise ValueError(f"unknown variant {variant!r}")


def lambda_matrix(p: TheoryParams, X, client_ids, covs, fedbn: bool) -> GramMatrix:
    """``V / alpha^2 + G`` (FedAvg) or ``V* / alpha^2 + G*`` (FedBN)."""
    V = gram_finite(p, X, client_ids, covs, VBN if fedbn else VAVG)
    G = gram_finite(p, X, client_ids, covs, GBN if fedbn else GAVG)
    return GramMatrix(V.entries / p.alpha**2 + G.entries, G.client_ids, LAMBDA_BN if fedbn else LAMBDA)


def gram_aux_mc(
    X: np.ndarray,
    client_ids,
    alpha: float,
    K: int,
    rng: np.random.Generator,
    variant: str = GAVG,
) -> GramMatrix:
    """Monte-Carlo estimate of ``E_v relu(v.x_p) relu(v.x_q)`` over ``v ~ N(0, alpha^2 I)``.

    The draws depend only on ``rng``, ``K`` and the input dimension, so the
    ``Gbn`` estimate from an identically seeded generator is exactly the
    ``Gavg`` estimate with cross-client entries zeroed.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    client_ids = np.asarray(client_ids, dtype=int)
    check_sample_order(client_ids)
    if variant not in (GAVG, GBN):
        raise ValueError(f"unknown variant {variant!r}")
    n, d = X.shape
    G = np.zeros((n, n))
    done = 0
    while done < K:
        k = min(_MC_CHUNK, K - done)
        v = alpha * rng.standard_normal((k, d))
        phi = np.maximum(X @ v.T, 0.0)
        G += phi @ phi.T
        done += k
    G /= K
    G = 0.5 * (G + G.T)
    if variant == GBN:
        G = np.where(same_client_mask(client_ids), G, 0.0)
    return GramMatrix(G, client_ids, variant)


def min_eig_compare(G: GramMatrix, Gstar: GramMatrix, atol: float = 1e-10) -> dict:
    """Compare the least eigenvalues of a FedAvg Gram matrix and its FedBN counterpart."""
    if G.size != Gstar.size or not np.array_equal(G.client_ids, Gstar.client_ids):
        raise ValueError("G and Gstar must describe the same ordered samples")
    mu0 = G.lambda_min()
    mu0_star = Gstar.lambda_min()
    clients = [int(i) for i in np.unique(Gstar.client_ids)]
    per_block = [sym_eig_min(Gstar.block(i)) for i in clients]
    degenerate = [int(p) for p in np.flatnonzero(np.diag(G.entries) < 1e-8)]
    return {
        "mu0": mu0,
        "mu0_star": mu0_star,
        "ordering_holds": bool(mu0_star >= mu0 - atol),
        "per_block_minima": per_block,
        "block_identity_holds": bool(abs(mu0_star - min(per_block)) <= atol),
        "degenerate_rows": degenerate,
    }


def gd_step(p: TheoryParams, X, y, client_ids, covs, eta: float, fedbn: bool) -> TheoryParams:
    """One gradient-descent step on ``0.5 * ||f - y||^2``.

    Without ``fedbn`` the gamma gradient is summed over clients and applied
    to every (tied) column.
    """
    r = theory_predict(p, X, client_ids, covs) - y
    g = weighted_grads(p, X, client_ids, covs, r)
    dgamma = g.dgamma
    if not fedbn:
        dgamma = np.repeat(dgamma.sum(axis=1, keepdims=True), p.n_clients, axis=1)
    out = p.copy()
    out.V = p.V - eta * g.dV
    out.gamma = p.gamma - eta * dgamma
    return out


def one_step_ntk_check(p: TheoryParams, X, y, client_ids, covs, eta: float, fedbn: bool = False) -> dict:
    """Relative error between the actual one-step change of the predictions
    and the kernel prediction ``-eta * Lambda(0) (f - y)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    client_ids = np.asarray(client_ids, dtype=int)
    f0 = theory_predict(p, X, client_ids, covs)
    lam = lambda_matrix(p, X, client_ids, covs, fedbn)
    predicted = -eta * lam.entries @ (f0 - y)
    p1 = gd_step(p, X, y, client_ids, covs, eta, fedbn)
    actual = theory_predict(p1, X, client_ids, covs) - f0
    norm = float(np.linalg.norm(actual))
    if norm == 0.0:
        return {"rel_error": None, "flagged": True, "actual_norm": 0.0,
                "predicted_norm": float(np.linalg.norm(predicted))}
    return {
        "rel_error": float(np.linalg.norm(actual - predicted) / norm),
        "flagged": False,
        "actual_norm": norm,
        "predicted_norm": float(np.linalg.norm(predicted)),
    }


def gd_trajectory(p: TheoryParams, X, y, client_ids, covs, eta: float, steps: int, fedbn: bool):
    """``||f(t) - y||^2`` for ``t = 0..steps`` under full-batch gradient descent."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    client_ids = np.asarray(client_ids, dtype=int)
    out = np.empty(steps + 1)
    for t in range(steps + 1):
        r = theory_predict(p, X, client_ids, covs) - y
        out[t] = float(r @ r)
        if t < steps:
            p = gd_step(p, X, y, client_ids, covs, eta, fedbn)
    return out, p


def linear_decay_fit(sq_residuals, eta: float, mu_est: float, tol: float = 0.05) -> dict:
    """Check ``r(t) <= (1 - eta * mu_est / 2)^t * r(0) * (1 + tol)`` at every step.

    For ``mu_est <= 0`` the rate collapses to 1, i.e. only non-increase
    relative to ``r(0)`` is checked, and the report is flagged.
    """
    r = np.asarray(sq_residuals, dtype=float)
    degenerate = not mu_est > 0
    rate = 1.0 if degenerate else 1.0 - eta * mu_est / 2.0
    if rate < 0:
        raise ValueError("eta * mu_est / 2 exceeds 1; step size too large for the bound")
    t = np.arange(r.size)
    bound = rate**t * r[0] * (1.0 + tol)
    bad = np.flatnonzero(r > bound)
    return {
        "holds": bool(bad.size == 0),
        "first_violation": int(bad[0]) if bad.size else None,
        "rate": rate,
        "degenerate": degenerate,
        "steps": int(r.size - 1),
        "final_ratio": float(r[-1] / r[0]) if r[0] > 0 else 0.0,
    }


def decay_experiment(params, X, y, ids, covs, steps: int, tol: float = 0.05):
    """Full-batch GD under both parameterizations with one shared step size.

    The step is ``1 / max(||Lambda(0)||, ||Lambda*(0)||)``; each bound uses
    the least eigenvalue of its own ``Lambda(0)``.
    """
    spectra = {}
    for name, fedbn in (("fedavg", False), ("fedbn", True)):
        spectra[name] = sym_eigvals(lambda_matrix(params, X, ids, covs, fedbn).entries)
    eta = 1.0 / max(s[-1] for s in spectra.values())
    out = {"eta": eta}
    for name, fedbn in (("fedavg", False), ("fedbn", True)):
        traj, _ = gd_trajectory(params, X, y, ids, covs, eta, steps, fedbn)
        rep = linear_decay_fit(traj, eta, float(spectra[name][0]), tol)
        rep["lambda_min"] = float(spectra[name][0])
        rep["lambda_max"] = float(spectra[name][-1])
        out[name] = {"report": rep, "trajectory": traj}
    return out
