"""Variance-preserving schedule, DDIM solver and the conditional teacher.

Step indices are 1-based: ``t_1 < ... < t_N``.  Index 0 denotes clean data
(``alpha = 1``, ``beta = 0``) and is only ever used as a solver endpoint.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .layers import (OMEGA_EMB_DIM, TIME_EMB_DIM, dense, fourier_embedding, init_dense,
                     one_hot, row_sq_norm, sinusoidal_embedding)
from .rng import Rng
from .validation import check_finite, check_labels, check_matrix, check_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    b: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.b.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(np.cumprod(1.0 - self.b))

    @property
    def beta(self) -> np.ndarray:
        return np.sqrt(1.0 - np.cumprod(1.0 - self.b))

    def coeffs(self, n):
        """``(alpha_n, beta_n)`` for scalar or array ``n`` in ``[0, N]``."""
        n = np.asarray(n)
        if np.any(n < 0) or np.any(n > self.n_steps):
            raise IndexError(f"step index out of range [0, {self.n_steps}]")
        a = np.concatenate([[1.0], self.alpha])[n]
        b = np.concatenate([[0.0], self.beta])[n]
        return a, b


def build_schedule(n_steps: int = 50, b_min: float = 2e-3, b_max: float = 3e-1) -> NoiseSchedule:
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    if not (0.0 < b_min <= b_max < 1.0):
        raise ValueError("need 0 < b_min <= b_max < 1")
    return NoiseSchedule(np.linspace(b_min, b_max, n_steps))


def _col(v, like):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim == 1 and np.ndim(like) == 2 else v


def perturb(z, n, noise, sched: NoiseSchedule):
    """``alpha_n z + beta_n noise`` (``n`` may be per-row)."""
    z, noise = np.asarray(z, dtype=np.float64), np.asarray(noise, dtype=np.float64)
    if z.shape != noise.shape:
        raise ValueError("noise shape must match z")
    check_step(n, sched.n_steps)
    a, b = sched.coeffs(n)
    return _col(a, z) * z + _col(b, z) * noise


def ddim_update(z, eps_hat, alpha_hi, beta_hi, alpha_lo, beta_lo):
    """DDIM increment from the high-noise to the low-noise level.

    Returns ``psi`` such that ``z + psi`` estimates the latent at the low level.
    A zero ``beta_lo`` uses the clean-data limit ``alpha_lo * x0_hat - z``.
    """
    z, eps_hat = np.asarray(z, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    a_hi, b_hi = _col(alpha_hi, z), _col(beta_hi, z)
    a_lo, b_lo = _col(alpha_lo, z), _col(beta_lo, z)
    with np.errstate(divide="ignore", invalid="ignore"):
        bracket = (b_hi * a_lo) / (a_hi * b_lo) - 1.0
        psi = (a_lo / a_hi) * z - b_lo * bracket * eps_hat - z
    limit = a_lo * (z - b_hi * eps_hat) / a_hi - z
    return np.where(np.broadcast_to(b_lo, psi.shape) > 0, psi, limit)


def ddim_step(z, n_hi, n_lo, eps_hat, sched: NoiseSchedule):
    n_hi, n_lo = np.asarray(n_hi), np.asarray(n_lo)
    if np.any(n_lo > n_hi):
        raise ValueError("ddim_step needs n_lo <= n_hi")
    if np.shape(eps_hat) != np.shape(z):
        raise ValueError("eps_hat shape must match z")
    a_hi, b_hi = sched.coeffs(n_hi)
    a_lo, b_lo = sched.coeffs(n_lo)
    return ddim_update(z, eps_hat, a_hi, b_hi, a_lo, b_lo)


def sampling_grid(n_steps: int, steps: int) -> np.ndarray:
    """Decreasing, evenly spaced sub-grid of ``[N, 1]`` of length ``steps``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    steps = min(steps, n_steps)
    return np.unique(np.round(np.linspace(n_steps, 1, steps)).astype(np.int64))[::-1]


def ddim_sample(eps_fn, z_T, sched: NoiseSchedule, steps: int):
    """Deterministic DDIM from ``z_T`` at ``t_N`` down to clean data.

    ``eps_fn(z, n)`` returns the noise prediction at integer step ``n``.
    """
    z = np.array(z_T, dtype=np.float64)
    grid = list(sampling_grid(sched.n_steps, steps)) + [0]
    for n_hi, n_lo in zip(grid[:-1], grid[1:]):
        z = z + ddim_step(z, n_hi, n_lo, eps_fn(z, n_hi), sched)
    return z


def schedule_relation_check(sched: NoiseSchedule) -> float:
    """Finite-difference check of the drift/diffusion relations on the grid.

    With ``t_n = n / N``: ``mu = d log(alpha)/dt`` from central differences and
    the discrete diffusion rate ``sigma^2 = -log(1 - b) / dt``.  Returns the max
    residual of ``d(alpha^2)/dt = 2 mu alpha^2`` and
    ``d(beta^2)/dt = 2 mu beta^2 + sigma^2`` over interior grid points.
    """
    N = sched.n_steps
    dt = 1.0 / N
    a2 = np.cumprod(1.0 - sched.b)
    b2 = 1.0 - a2
    log_a = 0.5 * np.log(a2)
    mu = (log_a[2:] - log_a[:-2]) / (2 * dt)
    rate = -np.log1p(-sched.b) / dt
    sigma2 = 0.5 * (rate[1:-1] + rate[2:])
    d_a2 = (a2[2:] - a2[:-2]) / (2 * dt)
    d_b2 = (b2[2:] - b2[:-2]) / (2 * dt)
    r1 = np.abs(d_a2 - 2 * mu * a2[1:-1])
    r2 = np.abs(d_b2 - (2 * mu * b2[1:-1] + sigma2))
    return float(max(r1.max(initial=0.0), r2.max(initial=0.0)))


# -- conditional epsilon backbone -------------------------------------------

def init_backbone(rng, dim_z, n_classes, hidden, with_omega=False) -> ParamSet:
    p = ParamSet()
    width = hidden[0]
    init_dense(p, rng, "in", dim_z, width)
    p["time.W"] = rng.normal((TIME_EMB_DIM, width)) * np.sqrt(1.0 / TIME_EMB_DIM)
    p["cond.E"] = rng.normal((n_classes + 1, width)) * 0.5
    for i in range(1, len(hidden)):
        init_dense(p, rng, f"h{i}", hidden[i - 1], hidden[i])
    init_dense(p, rng, "out", hidden[-1], dim_z)
    if with_omega:
        p["omega.W"] = np.zeros((OMEGA_EMB_DIM, width))
    return p


def backbone(p, z, n, cond, n_steps, n_classes, omega=None) -> Tensor:
    """Conditional MLP: embeddings are summed into the first pre-activation."""
    rows = z.shape[0]
    n = np.broadcast_to(np.asarray(n), (rows,))
    pre = ad.affine(z, p["in.W"], p["in.b"])
    pre = ad.add(pre, ad.matmul(sinusoidal_embedding(n, n_steps), p["time.W"]))
    pre = ad.add(pre, ad.matmul(one_hot(cond, n_classes + 1), p["cond.E"]))
    if omega is not None and "omega.W" in p:
        w = np.broadcast_to(np.asarray(omega, dtype=np.float64), (rows,))
        pre = ad.add(pre, ad.matmul(fourier_embedding(w), p["omega.W"]))
    h = ad.silu(pre)
    i = 1
    while f"h{i}.W" in p:
        h = dense(p, f"h{i}", h, "silu")
        i += 1
    return dense(p, "out", h)


class TeacherDenoiser(BaseEstimator):
    """Conditional epsilon-prediction diffusion model on latents.

    The null condition is class id ``n_classes``; it is learned through
    condition dropout with probability ``p_uncond``.
    """

    def __init__(self, n_classes=2, hidden=(64, 64), n_steps=50, b_min=2e-3, b_max=0.3,
                 iters=3000, lr=2e-3, batch_size=256, p_uncond=0.1, log_every=500, seed=0):
        self.n_classes = n_classes
        self.hidden = hidden
        self.n_steps = n_steps
        self.b_min = b_min
        self.b_max = b_max
        self.iters = iters
        self.lr = lr
        self.batch_size = batch_size
        self.p_uncond = p_uncond
        self.log_every = log_every
        self.seed = seed

    @property
    def null_class(self) -> int:
        return self.n_classes

    def _eps(self, p, z, n, cond):
        return backbone(p, z, n, cond, self.n_steps, self.n_classes)

    def loss(self, p, z, cond, n, noise) -> Tensor:
        """Mean over the batch of ``||noise - eps(perturb(z, n, noise), c, n)||^2``."""
        zt = perturb(z, n, noise, self.schedule_)
        return ad.mean(row_sq_norm(ad.sub(Tensor(noise), self._eps(p, Tensor(zt), n, cond))))

    def fit(self, Z, y):
        Z = check_matrix(Z, name="Z")
        y = check_labels(y, self.n_classes, Z.shape[0])
        self.schedule_ = build_schedule(self.n_steps, self.b_min, self.b_max)
        self.dim_z_ = Z.shape[1]
        rng = Rng(self.seed, "teacher")
        params = init_backbone(rng.child("init"), self.dim_z_, self.n_classes, tuple(self.hidden))
        state = ad.adam_init(params)
        draw = rng.child("batches")
        self.loss_history_ = []
        bs = min(self.batch_size, Z.shape[0])
        for it in range(self.iters):
            idx = draw.choice(Z.shape[0], bs)
            n = draw.integers(1, self.n_steps + 1, bs)
            noise = draw.normal((bs, self.dim_z_))
            drop = draw.uniform(bs) < self.p_uncond
            cond = np.where(drop, self.null_class, y[idx])
            loss, grads = ad.value_and_grad(lambda q: self.loss(q, Z[idx], cond, n, noise), params)
            check_finite(loss, "teacher", it)
            params, state = ad.adam_step(params, grads, state, self.lr)
            if it % self.log_every == 0 or it == self.iters - 1:
                self.loss_history_.append((it, loss))
                log.info("teacher iter %d loss %.5f", it, loss)
        self.params_ = params
        return self

    # -- inference -------------------------------------------------------------
    def predict_noise(self, z_t, cond, n) -> np.ndarray:
        check_is_fitted(self, "params_")
        z_t = check_matrix(z_t, self.dim_z_, "z_t")
        cond = check_labels(cond, self.n_classes, z_t.shape[0], allow_null=True)
        with ad.no_grad():
            return self._eps(self.params_.constants(), Tensor(z_t), n, cond).data

    def cfg_predict(self, z_t, cond, omega, n) -> np.ndarray:
        """``(1 + w) eps(z, c) - w eps(z, null)``; ``cond`` must not be the null class."""
        z_t = check_matrix(z_t, self.dim_z_, "z_t")
        cond = check_labels(cond, self.n_classes, z_t.shape[0], allow_null=True)
        if np.any(cond == self.null_class):
            raise ValueError("cfg_predict needs a real condition; use predict_noise for the null class")
        rows = z_t.shape[0]
        # separate passes keep omega = 0 bit-equal to the conditional prediction
        eps_c = self.predict_noise(z_t, cond, n)
        eps_u = self.predict_noise(z_t, np.full(rows, self.null_class), n)
        w = _col(np.broadcast_to(np.asarray(omega, dtype=np.float64), (rows,)), z_t)
        return (1.0 + w) * eps_c - w * eps_u

    def augmented_solve(self, z, n_hi, n_lo, cond, omega) -> np.ndarray:
        """CFG-combined DDIM estimate ``z + (1+w) psi(c) - w psi(null)`` (no gradients)."""
        if np.any(np.asarray(n_lo) > np.asarray(n_hi)):
            raise ValueError("augmented_solve needs n_lo <= n_hi")
        z = check_matrix(z, self.dim_z_, "z")
        rows = z.shape[0]
        cond = check_labels(cond, self.n_classes, rows)
        n_hi = np.broadcast_to(np.asarray(n_hi), (rows,))
        n_lo = np.broadcast_to(np.asarray(n_lo), (rows,))
        psi_c = ddim_step(z, n_hi, n_lo, self.predict_noise(z, cond, n_hi), self.schedule_)
        psi_u = ddim_step(z, n_hi, n_lo, self.predict_noise(z, np.full(rows, self.null_class), n_hi),
                          self.schedule_)
        w = _col(np.broadcast_to(np.asarray(omega, dtype=np.float64), (rows,)), z)
        return z + (1.0 + w) * psi_c - w * psi_u

    def sample(self, n_samples, steps=50, omega=0.0, cond=None, seed=0, z_T=None) -> np.ndarray:
        """DDIM samples in latent space.  Conditions cycle through the classes by default."""
        check_is_fitted(self, "params_")
        if cond is None:
            cond = np.arange(n_samples) % self.n_classes
        cond = check_labels(cond, self.n_classes, n_samples)
        if z_T is None:
            z_T = Rng(seed, "teacher.sample").normal((n_samples, self.dim_z_))
        return ddim_sample(lambda z, n: self.cfg_predict(z, cond, omega, n), z_T, self.schedule_, steps)


def train_teacher(config, Z, y, **overrides) -> TeacherDenoiser:
    kw = config.teacher_kwargs() if config is not None else {}
    kw.update(overrides)
    return TeacherDenoiser(**kw).fit(Z, y)


def cfg_predict(teacher, z_t, cond, omega, n):
    return teacher.cfg_predict(z_t, cond, omega, n)


def augmented_solve(teacher, z, n_hi, n_lo, cond, omega):
    return teacher.augmented_solve(z, n_hi, n_lo, cond, omega)


def teacher_sample(teacher, steps, omega, cond, seed, n_samples=None):
    cond = np.asarray(cond)
    n = n_samples if n_samples is not None else cond.shape[0]
    return teacher.sample(n, steps=steps, omega=omega, cond=np.broadcast_to(cond, (n,)), seed=seed)
