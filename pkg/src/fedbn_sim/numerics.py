"""Linear-algebra and sampling substrate.

Matrices are plain ``numpy.ndarray`` objects. Random streams are
``numpy.random.Generator`` instances backed by the counter-based Philox
bit generator, keyed by ``(seed, *stream)`` so every logical actor (a
client, a Monte-Carlo estimator, ...) owns an independent, reproducible
stream regardless of the order in which actors run.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np

__all__ = [
    "make_rng",
    "s_norm",
    "gaussian_sample",
    "sym_eigvals",
    "sym_eig_min",
    "write_matrix_csv",
    "read_matrix_csv",
]

_ASYM_RTOL = 1e-10
_JACOBI_MAX_SWEEPS = 100


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return the generator for ``stream`` under the global ``seed``.

    ``make_rng(s, i)`` and ``make_rng(s, j)`` are statistically independent
    for ``i != j``; the same arguments always give the same output stream.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ValueError("seed and stream ids must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def s_norm(v: np.ndarray, S: np.ndarray) -> float:
    """Covariance-weighted norm ``sqrt(v^T S v)``."""
    v = np.asarray(v, dtype=float)
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or v.shape != (S.shape[0],):
        raise ValueError(f"dimension mismatch: v {v.shape}, S {S.shape}")
    q = float(v @ S @ v)
    if not np.isfinite(q) or q < 0.0:
        raise ValueError("v^T S v is negative or non-finite; S is not positive definite")
    return float(np.sqrt(q))


def gaussian_sample(
    mean: np.ndarray,
    cov: np.ndarray,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Draw ``mean + L z`` with ``L L^T = cov`` and ``z`` standard normal.

    With ``size=None`` a single vector is returned, otherwise a
    ``(size, d)`` array of independent draws.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ValueError(f"cov shape {cov.shape} does not match mean of length {mean.size}")
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    if size is None:
        return mean + L @ rng.standard_normal(mean.size)
    z = rng.standard_normal((size, mean.size))
    return mean + z @ L.T


def _symmetrized(A: np.ndarray) -> np.ndarray:
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    scale = max(np.abs(A).max(initial=0.0), np.finfo(float).tiny)
    if np.abs(A - A.T).max(initial=0.0) > _ASYM_RTOL * scale:
        warnings.warn("matrix is not symmetric; using (A + A^T) / 2", RuntimeWarning, stacklevel=3)
    return 0.5 * (A + A.T)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Tournament schedule: n-1 rounds of n/2 disjoint (p, q) pairs covering
    # every off-diagonal index pair exactly once. A dummy player pads odd n.
    players = list(range(n + (n % 2)))
    half = len(players) // 2
    rounds = []
    for _ in range(len(players) - 1):
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < n) & (q < n)
        p, q = p[keep], q[keep]
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0], players[-1], *players[1:-1]]
    return rounds


def sym_eigvals(A: np.ndarray) -> np.ndarray:
    """Full spectrum of a symmetric matrix by cyclic Jacobi rotations, ascending.

    Each sweep visits all index pairs in a round-robin order; within a round
    the pairs are disjoint, so their rotations commute and are applied
    together. An off-diagonal entry is treated as zero once it is negligible
    relative to its two diagonal entries; iteration ends after a sweep that
    rotates nothing.
    """
    A = _symmetrized(A)
    n = A.shape[0]
    if n == 1:
        return A.diagonal().copy()
    rounds = _round_robin(n)
    eps = np.finfo(float).eps
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            apq = A[p, q]
            app, aqq = A[p, p], A[q, q]
            small = np.abs(apq) <= eps * np.sqrt(np.abs(app * aqq))
            if small.any():
                A[p[small], q[small]] = 0.0
                A[q[small], p[small]] = 0.0
            active = ~small
            if not active.any():
                continue
            rotated = True
            p, q, apq = p[active], q[active], apq[active]
            theta = (aqq[active] - app[active]) / (2.0 * apq)
            big = np.abs(theta) > 1e150
            safe = np.where(big, 1.0, theta)
            t = np.where(
                big,
                0.5 / np.where(big, theta, 1.0),
                np.sign(safe) / (np.abs(safe) + np.sqrt(1.0 + safe * safe)),
            )
            t[theta == 0.0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            rp, rq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * rp - s[:, None] * rq
            A[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = cp * c - cq * s
            A[:, q] = cp * s + cq * c
            A[p, q] = 0.0
            A[q, p] = 0.0
        if not rotated:
            return np.sort(A.diagonal())
    raise np.linalg.LinAlgError(
        f"Jacobi iteration did not converge in {_JACOBI_MAX_SWEEPS} sweeps (ill-conditioned input?)"
    )


def sym_eig_min(A: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(sym_eigvals(A)[0])


def write_matrix_csv(path: str | Path, A: np.ndarray) -> None:
    """Write one row per line with round-trip (17 significant digit) precision."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in A:
            fh.write(",".join(f"{x:.17g}" for x in row))
            fh.write("\n")


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        rows = [[float(tok) for tok in line.split(",")] for line in fh if line.strip()]
    return np.array(rows, dtype=float)
