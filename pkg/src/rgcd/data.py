"""Toy conditional datasets living on a low-dimensional manifold in R^D_x.

Every preset draws a class-conditional "content" vector, lifts it linearly into
``dim_x`` dimensions and adds small isotropic noise.  For the 2-D presets the
first two output coordinates are the planar content itself, so scatter plots
of ``x[:, :2]`` show the mixture directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

PRESETS = ("mixture-2d", "mixture-16d", "swiss-roll")


@dataclass
class Dataset:
    preset: str
    n_classes: int
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def dim_x(self) -> int:
        return self.X_train.shape[1]

    def class_means(self) -> np.ndarray:
        return np.stack([self.X_train[self.y_train == c].mean(axis=0) for c in range(self.n_classes)])


def _planar_content(preset, rng, y, n_classes):
    n = y.shape[0]
    if preset == "mixture-2d":
        ang = 2.0 * np.pi * y / n_classes
        centers = 2.0 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return centers + 0.5 * rng.normal((n, 2))
    # swiss roll; class = which half of the sweep
    frac = (y + rng.uniform(n)) / n_classes
    theta = 1.5 * np.pi * (1.0 + 2.0 * frac)
    roll = np.stack([theta * np.cos(theta), theta * np.sin(theta)], axis=1) / 5.0
    return roll + 0.1 * rng.normal((n, 2))


def make_dataset(preset: str = "mixture-2d", n_train: int = 4096, n_test: int = 2048,
                 dim_x: int = 16, n_classes: int = 2, seed: int = 0, noise: float = 0.05) -> Dataset:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if dim_x < 4:
        raise ValueError("dim_x must be at least 4")
    rng = Rng(seed, f"data.{preset}")
    n = n_train + n_test
    y = np.arange(n) % n_classes
    y = y[rng.permutation(n)]
    if preset == "mixture-16d":
        simplex = 2.0 * np.eye(4)[np.arange(n_classes) % 4]
        if n_classes > 4:
            simplex += 0.5 * rng.normal((n_classes, 4))
        content = simplex[y] + 0.4 * rng.normal((n, 4))
        q, _ = np.linalg.qr(rng.normal((dim_x, 4)))
        X = content @ q.T
    else:
        plane = _planar_content(preset, rng, y, n_classes)
        nuisance = 0.3 * rng.normal((n, 2))
        factors = np.concatenate([plane, nuisance], axis=1)
        lift = rng.normal((dim_x - 2, 4)) * 0.5
        X = np.concatenate([plane, factors @ lift.T], axis=1)
    X = X + noise * rng.normal(X.shape)
    return Dataset(preset, n_classes, X[:n_train], y[:n_train], X[n_train:], y[n_train:])
