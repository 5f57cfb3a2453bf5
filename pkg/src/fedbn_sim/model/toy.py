"""One-parameter cosine regressor behind a scale-only normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datagen import ToyDataset


@dataclass
class ToyModel:
    w: float
    gamma: float

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def predict(self, xs: np.ndarray) -> np.ndarray:
        return np.cos(self.w * np.asarray(xs, dtype=float) / self.gamma)


def toy_mse(data: ToyDataset, w: float, gamma: float) -> float:
    """Mean squared error of ``cos(w * x / gamma)`` on ``data``."""
    r = ToyModel(w, gamma).predict(data.xs) - data.ys
    return float(np.mean(r * r))


def toy_mse_surface(data: ToyDataset, w_grid, gamma_grid) -> np.ndarray:
    """``out[a, b] = toy_mse(data, w_grid[a], gamma_grid[b])``."""
    w_grid = np.atleast_1d(np.asarray(w_grid, dtype=float))
    gamma_grid = np.atleast_1d(np.asarray(gamma_grid, dtype=float))
    if w_grid.size == 0 or gamma_grid.size == 0:
        raise ValueError("grids must be nonempty")
    if np.any(gamma_grid <= 0):
        raise ValueError("gamma grid must be positive")
    out = np.empty((w_grid.size, gamma_grid.size))
    u = data.xs[None, :] / gamma_grid[:, None]  # (n_gamma, n)
    for a, w in enumerate(w_grid):
        r = np.cos(w * u) - data.ys[None, :]
        out[a] = np.mean(r * r, axis=1)
    return out
