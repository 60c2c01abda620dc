"""Small MLP building blocks and fixed embeddings shared by every network."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

TIME_EMB_DIM = 16
OMEGA_EMB_DIM = 16


def sinusoidal_embedding(n, n_steps: int, dim: int = TIME_EMB_DIM) -> np.ndarray:
    """Transformer-style sin/cos features of the normalised step ``n / N``."""
    t = np.atleast_1d(np.asarray(n, dtype=np.float64)) / n_steps
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(200.0), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def fourier_embedding(omega, dim: int = OMEGA_EMB_DIM) -> np.ndarray:
    """Fourier features of the guidance scale on a log-spaced frequency bank."""
    w = np.atleast_1d(np.asarray(omega, dtype=np.float64))
    half = dim // 2
    freqs = np.logspace(-2.0, 1.0, half, base=2.0)
    ang = w[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


def init_dense(params: ParamSet, rng, name: str, fan_in: int, fan_out: int, zero=False):
    params[f"{name}.W"] = np.zeros((fan_in, fan_out)) if zero else glorot(rng, fan_in, fan_out)
    params[f"{name}.b"] = np.zeros(fan_out)


def dense(p, name: str, h, act=None) -> Tensor:
    out = ad.affine(h, p[f"{name}.W"], p[f"{name}.b"])
    if act == "silu":
        return ad.silu(out)
    if act == "tanh":
        return ad.tanh(out)
    return out


def row_sq_norm(x) -> Tensor:
    return ad.sum(ad.square(x), axis=1)
