"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, stage: str, iteration: int, loss_name: str = "loss"):
        self.stage, self.iteration, self.loss_name = stage, iteration, loss_name
        super().__init__(f"{stage}: {loss_name} is not finite at iteration {iteration}")


def check_matrix(X, n_features=None, name="X") -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_labels(y, n_classes: int, n_samples=None, allow_null=False) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 0:
        y = np.full(n_samples if n_samples is not None else 1, int(y))
    y = y.astype(np.int64)
    top = n_classes + 1 if allow_null else n_classes
    if y.size and (y.min() < 0 or y.max() >= top):
        raise ValueError(f"condition ids must lie in [0, {top - 1}]")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} conditions for {n_samples} samples")
    return y


def check_step(n, n_steps: int, low: int = 1) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(n)).astype(np.int64)
    if arr.size and (arr.min() < low or arr.max() > n_steps):
        raise IndexError(f"step index out of range [{low}, {n_steps}]")
    return arr


def check_finite(value: float, stage: str, iteration: int, loss_name: str = "loss") -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(stage, iteration, loss_name)
