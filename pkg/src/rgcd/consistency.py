"""Consistency model, latent consistency distillation and multistep sampling.

The backbone predicts noise like the teacher.  Its clean-data estimate
(see :func:`readout_coeffs`) is turned into the skip-connection
residual ``F = (x0 - c_skip z) / c_out`` (``F = 0`` at the boundary step).  A
student initialised from the teacher therefore starts from the teacher's
one-step estimate wherever the signal dominates, and ``f(z, 1) = z`` holds
exactly for any parameters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .diffusion import NoiseSchedule, backbone, perturb
from .layers import OMEGA_EMB_DIM
from .rng import Rng
from .validation import check_finite, check_labels, check_matrix, check_step

log = logging.getLogger(__name__)

READOUT_FLOOR = 0.05


def boundary_coeffs(n, sigma_data: float, sched: NoiseSchedule):
    """``(c_skip, c_out)`` on normalised time ``t = n / N``; ``(1, 0)`` at ``n = 1``."""
    n = check_step(n, sched.n_steps).astype(np.float64)
    t = n / sched.n_steps
    t1 = 1.0 / sched.n_steps
    sd2 = sigma_data ** 2
    c_skip = sd2 / ((t - t1) ** 2 + sd2)
    c_out = sigma_data * (t - t1) / np.sqrt(sd2 + t ** 2)
    return c_skip, c_out


@dataclass
class ConsistencyModel:
    params: ParamSet
    schedule: NoiseSchedule
    n_classes: int
    sigma_data: float = 0.5
    ema_params: ParamSet | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim_z(self) -> int:
        return self.params["out.b"].shape[0]

    @classmethod
    def from_teacher(cls, teacher, sigma_data=0.5) -> "ConsistencyModel":
        p = teacher.params_.copy()
        p["omega.W"] = np.zeros((OMEGA_EMB_DIM, p["in.W"].shape[1]))
        return cls(p, teacher.schedule_, teacher.n_classes, sigma_data, p.copy())

    def apply(self, z, n, cond, omega, params=None) -> Tensor:
        """``c_skip z + c_out F(z, n, c, w)`` as a graph node."""
        p = self.params.constants() if params is None else params
        z = ad.as_tensor(z)
        rows = z.shape[0]
        n = np.broadcast_to(check_step(n, self.schedule.n_steps), (rows,))
        c_skip, c_out = boundary_coeffs(n, self.sigma_data, self.schedule)
        a, b = self.schedule.coeffs(n)
        eps = backbone(p, z, n, cond, self.schedule.n_steps, self.n_classes, omega)
        cz, ce = readout_coeffs(a, b)
        x0 = ad.sub(ad.mul(z, cz[:, None]), ad.mul(eps, ce[:, None]))
        inv = np.divide(1.0, c_out, out=np.zeros_like(c_out), where=c_out > 0)
        F = ad.mul(ad.sub(x0, ad.mul(z, c_skip[:, None])), inv[:, None])
        return combine(z, F, c_skip, c_out)

    def __call__(self, z, n, cond, omega=0.0, ema=False) -> np.ndarray:
        p = self.ema_params if ema else self.params
        z = check_matrix(z, self.dim_z, "z")
        cond = check_labels(cond, self.n_classes, z.shape[0])
        with ad.no_grad():
            return self.apply(Tensor(z), n, cond, omega, p.constants()).data

    def sample(self, n_samples, steps=1, omega=0.0, cond=None, seed=0, taus=None) -> np.ndarray:
        return multistep_sample(self, steps, taus, omega, cond, seed, n_samples)


def combine(z, F, c_skip, c_out) -> Tensor:
    """``c_skip z + c_out F`` with per-row coefficients."""
    return ad.add(ad.mul(z, np.asarray(c_skip)[:, None]), ad.mul(F, np.asarray(c_out)[:, None]))


def cm_apply(model: ConsistencyModel, z_t, omega, cond, n, params=None) -> Tensor:
    return model.apply(z_t, n, cond, omega, params)


def huber_rows(a, b, c_h: float) -> Tensor:
    """Per-row pseudo-Huber distance ``sqrt(||a - b||^2 + c^2) - c``."""
    if c_h <= 0:
        raise ValueError("c_h must be positive")
    d2 = ad.sum(ad.square(ad.sub(a, b)), axis=-1)
    return ad.sub(ad.sqrt(ad.add(d2, c_h ** 2)), c_h)


def huber_distance(a, b, c_h: float) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("huber_distance needs equal shapes")
    d2 = float(np.sum((a - b) ** 2))
    if c_h <= 0:
        raise ValueError("c_h must be positive")
    # d2 / (sqrt(d2 + c^2) + c) avoids cancellation for tiny residuals
    return d2 / (np.sqrt(d2 + c_h ** 2) + c_h)


def ema_update(target: ParamSet, online: ParamSet, mu: float) -> ParamSet:
    """``mu * target + (1 - mu) * online``; the result carries no gradient history."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    return ParamSet((k, mu * target[k] + (1.0 - mu) * online[k]) for k in target)


# -- distillation -------------------------------------------------------------

@dataclass
class DistillBatch:
    z: np.ndarray
    cond: np.ndarray
    n: np.ndarray       # target (lower) step; the student sees n + k
    noise: np.ndarray
    omega: np.ndarray


def draw_batch(rng: Rng, Z, y, batch_size, n_steps, k, omega_min, omega_max) -> DistillBatch:
    if k < 1 or n_steps - k < 1:
        raise ValueError(f"skipping interval k={k} needs 1 <= k < N={n_steps}")
    idx = rng.choice(Z.shape[0], batch_size)
    n = rng.integers(1, n_steps - k + 1, batch_size)
    noise = rng.normal((batch_size, Z.shape[1]))
    omega = rng.uniform(batch_size, omega_min, omega_max)
    return DistillBatch(Z[idx], y[idx], n, noise, omega)


@dataclass
class LcdTerms:
    loss: Tensor
    z1: Tensor            # student output at n + k (graph node)
    z2: np.ndarray        # target output at n (constant)


def lcd_terms(model, params, ema_params, teacher, batch: DistillBatch, k, c_h) -> LcdTerms:
    n_hi = batch.n + k
    z_hi = perturb(batch.z, n_hi, batch.noise, model.schedule)
    z1 = model.apply(Tensor(z_hi), n_hi, batch.cond, batch.omega, params)
    z_lo = teacher.augmented_solve(z_hi, n_hi, batch.n, batch.cond, batch.omega)
    with ad.no_grad():
        z2 = model.apply(Tensor(z_lo), batch.n, batch.cond, batch.omega, ema_params).data
    loss = ad.mean(huber_rows(z1, ad.detach(z2), c_h))
    return LcdTerms(loss, z1, z2)


def lcd_loss(params, ema_params, teacher, batch, k, c_h, model) -> Tensor:
    """LCD objective on one batch; only ``params`` (not ``ema_params``) get gradients."""
    return lcd_terms(model, params, ema_params, teacher, batch, k, c_h).loss


@dataclass
class DistillResult:
    model: ConsistencyModel
    losses: np.ndarray
    extra: dict = field(default_factory=dict)


def distill_loop(model, teacher, Z, y, *, k=2, mu=0.95, c_h=1e-3, omega_min=0.0, omega_max=0.0,
                 iters=2000, lr=1e-3, batch_size=256, seed=0, log_every=100,
                 reward=None, beta=0.0, on_step=None, stage="lcd") -> DistillResult:
    """Shared LCD / reward-guided loop.

    ``reward(z1, cond)`` returns the batch-mean reward of the student output as
    a graph node; the objective becomes ``lcd - beta * reward``.  ``on_step``
    is called after the student update with the iteration index, the batch and
    the ``LcdTerms`` (values only) and may return a float to log.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    Z = check_matrix(Z, model.dim_z, "Z")
    y = check_labels(y, model.n_classes, Z.shape[0])
    params, ema = model.params.copy(), model.ema_params.copy()
    state = ad.adam_init(params)
    draw = Rng(seed, "distill").child("batches")
    bs = min(batch_size, Z.shape[0])
    losses = np.empty(iters)
    side = []
    for it in range(iters):
        batch = draw_batch(draw, Z, y, bs, model.schedule.n_steps, k, omega_min, omega_max)
        leaves = params.leaves()
        terms = lcd_terms(model, leaves, ema.constants(), teacher, batch, k, c_h)
        total = terms.loss
        if reward is not None:
            total = ad.sub(total, ad.mul(reward(terms.z1, batch.cond), beta))
        total.backward()
        value = float(total.data)
        check_finite(value, stage, it, "lcd loss" if reward is None else "rg-lcd loss")
        grads = ParamSet((name, t.grad if t.grad is not None else np.zeros_like(t.data))
                         for name, t in leaves.items())
        params, state = ad.adam_step(params, grads, state, lr)
        ema = ema_update(ema, params, mu)
        losses[it] = value
        if on_step is not None:
            extra = on_step(it, batch, LcdTerms(terms.loss, Tensor(terms.z1.data), terms.z2))
            if extra is not None:
                side.append(extra)
        if it % log_every == 0 or it == iters - 1:
            log.info("%s iter %d loss %.5f", stage, it, value)
    out = ConsistencyModel(params, model.schedule, model.n_classes, model.sigma_data, ema,
                           dict(model.meta))
    return DistillResult(out, losses, {"side_losses": np.asarray(side)})


def distill_lcd(config, teacher, codec, dataset, seed=None) -> DistillResult:
    cm = config.cm
    model = ConsistencyModel.from_teacher(teacher, cm.sigma_data)
    Z = codec.transform(dataset.X_train)
    return distill_loop(model, teacher, Z, dataset.y_train, **config.distill_kwargs(seed))


# -- sampling -------------------------------------------------------------------

def default_taus(n_steps: int, steps: int) -> np.ndarray:
    """Evenly spaced interior grid points for ``steps``-step sampling."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    taus = np.round(np.linspace(n_steps, 1, steps + 1)[1:-1]).astype(np.int64)
    return np.clip(taus, 1, n_steps - 1)


def check_taus(taus, n_steps) -> np.ndarray:
    taus = np.asarray(taus, dtype=np.int64).reshape(-1)
    if taus.size and (np.any(np.diff(taus) >= 0) or taus[0] >= n_steps):
        raise ValueError("tau sequence must be strictly decreasing and below N")
    check_step(taus, n_steps)
    return taus


def multistep_sample(model: ConsistencyModel, steps=1, taus=None, omega=0.0, cond=None, seed=0,
                     n_samples=None, ema=False) -> np.ndarray:
    """Alternate consistency mappings and re-noising, starting from pure noise at ``t_N``."""
    N = model.schedule.n_steps
    taus = default_taus(N, steps) if taus is None else np.asarray(taus)
    if len(taus) != steps - 1:
        raise ValueError(f"{steps}-step sampling needs {steps - 1} intermediate steps")
    taus = check_taus(taus, N)
    if cond is None:
        cond = np.arange(n_samples) % model.n_classes
    cond = check_labels(cond, model.n_classes, n_samples)
    n_samples = cond.shape[0]
    rng = Rng(seed, "cm.sample")
    z = model(rng.normal((n_samples, model.dim_z)), N, cond, omega, ema)
    for tau in taus:
        z_tau = perturb(z, np.full(n_samples, tau), rng.normal(z.shape), model.schedule)
        z = model(z_tau, tau, cond, omega, ema)
    return z


def readout_coeffs(a, b, floor=READOUT_FLOOR):
    """Clean-data readout ``x0 = cz * z - ce * eps`` of the noise network.

    Blends the noise-prediction form ``(z - b eps) / a`` with the velocity form
    ``a z - b eps`` using the weight ``a^2 / (a^2 + floor^2)``.  Where the
    signal is strong this is the teacher's own readout; near pure noise the
    coefficients stay bounded instead of growing like ``1 / a``.
    """
    lam = a ** 2 / (a ** 2 + floor ** 2)
    cz = lam / a + (1.0 - lam) * a
    ce = b * (lam / a + (1.0 - lam))
    return cz, ce
