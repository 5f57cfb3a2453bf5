"""Synthetic feature-shift clients and the one-dimensional cosine toy data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import gaussian_sample, sym_eig_min

DEFAULT_DIM = 10
DEFAULT_RHO = 0.08


@dataclass
class ClientDataset:
    client_id: int
    features: np.ndarray  # (M, d)
    labels: np.ndarray  # (M,)
    cov: np.ndarray  # (d, d), S_i

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        M, d = self.features.shape
        if self.labels.shape != (M,):
            raise ValueError(f"expected {M} labels, got shape {self.labels.shape}")
        if self.cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {self.cov.shape}")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check_theory_assumptions(self, atol: float = 1e-8) -> None:
        """Raise ``ValueError`` unless the data are centered, ``cov`` is PD and
        no two rows are parallel."""
        if np.abs(self.features.mean(axis=0)).max() > atol:
            raise ValueError(f"client {self.client_id}: features are not centered")
        if np.abs(self.cov - self.cov.T).max() > 1e-12 or sym_eig_min(self.cov) <= 0.0:
            raise ValueError(f"client {self.client_id}: cov is not symmetric positive definite")
        if parallel_rows(self.features):
            raise ValueError(f"client {self.client_id}: two samples are scalar multiples of each other")


@dataclass
class ToyDataset:
    xs: np.ndarray
    ys: np.ndarray
    local_std: float


def parallel_rows(X: np.ndarray, tol: float = 1e-10) -> bool:
    """True if any two nonzero rows of ``X`` are scalar multiples of each other."""
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1)
    nz = norms > 0
    U = X[nz] / norms[nz, None]
    cos = np.abs(U @ U.T)
    np.fill_diagonal(cos, 0.0)
    return bool((cos > 1.0 - tol).any())


def make_offdiag_cov(d: int, rho: float) -> np.ndarray:
    """Unit-diagonal covariance with constant off-diagonal ``rho``.

    Requires ``|rho| < 1/(d-1)`` so the matrix is strictly diagonally dominant.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    if not abs(rho) < 1.0 / (d - 1):
        raise ValueError(f"rho={rho} outside the positive-definite range |rho| < {1.0 / (d - 1):.6g}")
    cov = np.full((d, d), float(rho))
    np.fill_diagonal(cov, 1.0)
    return cov


def make_gaussian_pair_client(
    client_id: int,
    cov: np.ndarray,
    M: int,
    rng: np.random.Generator,
    center: bool = False,
) -> ClientDataset:
    """Half the samples from N(-1, cov) with label 0, half from N(+1, cov) with label 1.

    For odd ``M`` class 0 receives the extra sample. Rows are shuffled with ``rng``. With ``center=True`` the feature columns
    are shifted to zero mean and ``cov`` is replaced by the second-moment
    matrix of the centered class mixture, ``cov + 11^T``; otherwise the
    raw features and the generating covariance are kept.
    """
    cov = np.asarray(cov, dtype=float)
    if M < 2:
        raise ValueError(f"M must be at least 2, got {M}")
    d = cov.shape[0]
    n1 = M // 2
    n0 = M - n1
    X = np.vstack([
        gaussian_sample(-np.ones(d), cov, rng, size=n0),
        gaussian_sample(np.ones(d), cov, rng, size=n1),
    ])
    y = np.concatenate([np.zeros(n0), np.ones(n1)])
    order = rng.permutation(M)
    X, y = X[order], y[order]
    if center:
        X = X - X.mean(axis=0)
        cov = cov + np.ones((d, d))
    return ClientDataset(client_id, X, y, cov.copy())


def estimate_cov(features: np.ndarray) -> np.ndarray:
    """Second-moment estimate ``X^T X / M`` of centered features."""
    X = np.asarray(features, dtype=float)
    M, d = X.shape
    if M < d + 1:
        raise ValueError(f"need at least d+1={d + 1} rows, got {M}")
    S = X.T @ X / M
    S = 0.5 * (S + S.T)
    if sym_eig_min(S) <= 1e-12:
        raise ValueError("features are rank deficient; covariance estimate is singular")
    return S


def make_cos_dataset(
    w_true: float,
    x_std: float,
    noise_std: float,
    n: int,
    rng: np.random.Generator,
) -> ToyDataset:
    """Draw ``x ~ N(0, x_std^2)`` and ``y = cos(w_true * x / x_std) + noise``.

    The label depends on the standardized input, so clients that differ only
    in ``x_std`` share one optimum once inputs are scaled by the local std.
    """
    if x_std <= 0 or noise_std < 0 or n < 2:
        raise ValueError("need x_std > 0, noise_std >= 0 and n >= 2")
    z = rng.standard_normal(n)
    noise = noise_std * rng.standard_normal(n)
    xs = x_std * z
    ys = np.cos(w_true * z) + noise
    return ToyDataset(xs=xs, ys=ys, local_std=float(np.std(xs)))


def write_client_csv(path: str | Path, ds: ClientDataset) -> None:
    """Write features and labels to ``path`` and ``client_id``/``cov`` to a JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{j}" for j in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([f"{v:.17g}" for v in row] + [f"{label:.17g}"])
    meta = {"client_id": ds.client_id, "cov": ds.cov.tolist()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n", encoding="ascii")


def read_client_csv(path: str | Path) -> ClientDataset:
    path = Path(path)
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = np.array([[float(v) for v in r] for r in reader], dtype=float)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="ascii"))
    rows = rows.reshape(-1, len(header))
    return ClientDataset(int(meta["client_id"]), rows[:, :-1], rows[:, -1], np.array(meta["cov"]))
