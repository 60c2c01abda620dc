"""Latent proxy reward model: contrastive pretraining, preference-KL finetuning,
and distillation guided through the proxy."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .consistency import ConsistencyModel, distill_loop
from .layers import dense, init_dense
from .rng import Rng
from .validation import check_finite, check_labels, check_matrix

log = logging.getLogger(__name__)

PREF_ONE_HOT = 1.0 - 1e-6


def _cosine(a, b) -> Tensor:
    num = ad.sum(ad.mul(a, b), axis=-1)
    den = ad.mul(ad.sqrt(ad.sum(ad.square(a), axis=-1)), ad.sqrt(ad.sum(ad.square(b), axis=-1)))
    return ad.div(num, den)


def lrm_embed(p, z) -> Tensor:
    h = ad.as_tensor(z)
    i = 0
    while f"enc.{i + 1}.W" in p:
        h = dense(p, f"enc.{i}", h, "silu")
        i += 1
    return dense(p, f"enc.{i}", h)


def lrm_reward_tensor(p, z, cond, cos_scale: float) -> Tensor:
    """Per-row ``cos_scale * cos(g(z), e_c)``."""
    e = ad.matmul(np.eye(p["cond.E"].shape[0])[np.asarray(cond)], p["cond.E"])
    return ad.mul(_cosine(lrm_embed(p, z), e), cos_scale)


def _log_sigmoid(d) -> Tensor:
    """``log(1 / (1 + exp(-d)))`` via a two-term log-sum-exp."""
    d = ad.as_tensor(d)
    zeros = Tensor(np.zeros(d.shape + (1,)))
    return ad.neg(ad.logsumexp(ad.concat([zeros, ad.reshape(ad.neg(d), d.shape + (1,))], axis=-1), axis=-1))


def preference_dist(r_i, r_j, tau: float):
    """Probability of preferring ``i`` over ``j`` at temperature ``tau``."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau <= 0):
        raise ValueError("tau must be positive")
    d = (np.asarray(r_i, dtype=np.float64) - np.asarray(r_j, dtype=np.float64)) / tau
    with ad.no_grad():
        out = ad.exp(_log_sigmoid(np.atleast_1d(d))).data
    return out if np.ndim(d) else float(out[0])


def pair_kl(r_i, r_j, tau_l, log_q, log_1mq) -> Tensor:
    """Per-row two-point ``KL(P || Q)`` with ``P`` from proxy rewards."""
    d = ad.div(ad.sub(r_i, r_j), tau_l)
    log_p, log_1mp = _log_sigmoid(d), _log_sigmoid(ad.neg(d))
    p = ad.exp(log_p)
    return ad.add(ad.mul(p, ad.sub(log_p, log_q)),
                  ad.mul(ad.sub(1.0, p), ad.sub(log_1mp, log_1mq)))


PAIRS = ((0, 1), (0, 2), (1, 2))


def expert_log_q(rm, xs, cond, tau_e, eps_real=0.0):
    """``(log Q, log(1 - Q))`` for every pair of decoded triplet members."""
    out = {}
    if rm.differentiable:
        r = [rm.reward(x, cond) for x in xs]
        r[0] = r[0] + eps_real
        for i, j in PAIRS:
            with ad.no_grad():
                d = Tensor((r[i] - r[j]) / tau_e)
                out[i, j] = (_log_sigmoid(d).data, _log_sigmoid(ad.neg(d)).data)
        return out
    for i, j in PAIRS:
        win = rm.prefer(xs[i], xs[j], cond)
        q = np.where(win, PREF_ONE_HOT, 1.0 - PREF_ONE_HOT)
        out[i, j] = (np.log(q), np.log1p(-q))
    return out


def lrm_loss(params, triplet, cond, rm, codec, tau_l=1.0, tau_e=1.0, eps_real=0.0,
             cos_scale=5.0, log_q=None) -> Tensor:
    """Batch mean of the summed pairwise KL between proxy and expert preferences.

    ``triplet`` holds the real latent, the student output and the target
    output.  Expert rewards are taken on detached decodings, so the loss
    reaches only the proxy parameters.
    """
    zs = [np.asarray(ad.as_tensor(z).data) for z in triplet]
    if log_q is None:
        xs = [codec.decode_detached(Tensor(z)).data for z in zs]
        log_q = expert_log_q(rm, xs, cond, tau_e, eps_real)
    r = [lrm_reward_tensor(params, Tensor(z), cond, cos_scale) for z in zs]
    total = None
    for i, j in PAIRS:
        kl = pair_kl(r[i], r[j], tau_l, *log_q[i, j])
        total = kl if total is None else ad.add(total, kl)
    return ad.mean(total)


def infonce_loss(params, z, cond, n_classes, cos_scale) -> Tensor:
    """Symmetric contrastive loss between latents and condition embeddings.

    Logits are ``cos_scale * cos`` for every (latent, condition-of-row) pair;
    rows sharing a class count as positives.
    """
    g = lrm_embed(params, z)
    e = ad.matmul(np.eye(n_classes + 1)[cond], params["cond.E"])
    gn = ad.div(g, ad.sqrt(ad.sum(ad.square(g), axis=1, keepdims=True)))
    en = ad.div(e, ad.sqrt(ad.sum(ad.square(e), axis=1, keepdims=True)))
    logits = ad.mul(ad.matmul(gn, ad.transpose(en)), cos_scale)
    pos = (cond[:, None] == cond[None, :]).astype(np.float64)
    mask = np.where(pos > 0, 0.0, -np.inf)
    rows = ad.sub(ad.logsumexp(ad.add(logits, mask), axis=1), ad.logsumexp(logits, axis=1))
    cols = ad.sub(ad.logsumexp(ad.add(logits, mask), axis=0), ad.logsumexp(logits, axis=0))
    return ad.neg(ad.mul(ad.add(ad.mean(rows), ad.mean(cols)), 0.5))


class LatentRewardModel(BaseEstimator):
    """Cosine-similarity reward between an MLP embedding of a latent and a condition embedding."""

    def __init__(self, n_classes=2, hidden=(64,), embed_dim=16, cos_scale=5.0, iters=1000,
                 lr=3e-3, batch_size=256, log_every=100, seed=0):
        self.n_classes = n_classes
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.cos_scale = cos_scale
        self.iters = iters
        self.lr = lr
        self.batch_size = batch_size
        self.log_every = log_every
        self.seed = seed

    def _init_params(self, dim_z, rng) -> ParamSet:
        p = ParamSet()
        widths = [dim_z, *self.hidden, self.embed_dim]
        for i in range(len(widths) - 1):
            init_dense(p, rng, f"enc.{i}", widths[i], widths[i + 1])
        p["cond.E"] = rng.normal((self.n_classes + 1, self.embed_dim))
        return p

    def fit(self, Z, y):
        """Contrastive pretraining on (latent, condition) pairs."""
        Z = check_matrix(Z, name="Z")
        y = check_labels(y, self.n_classes, Z.shape[0])
        rng = Rng(self.seed, "lrm")
        params = self._init_params(Z.shape[1], rng.child("init"))
        state = ad.adam_init(params)
        draw = rng.child("batches")
        bs = min(self.batch_size, Z.shape[0])
        self.loss_history_ = []
        for it in range(self.iters):
            idx = draw.choice(Z.shape[0], bs)
            cond = y[idx]
            if np.unique(cond).size < 2:
                warnings.warn(f"lrm pretraining: batch {it} has a single condition; skipped")
                continue
            loss, grads = ad.value_and_grad(
                lambda q: infonce_loss(q, Tensor(Z[idx]), cond, self.n_classes, self.cos_scale), params)
            check_finite(loss, "lrm-pretrain", it, "contrastive loss")
            params, state = ad.adam_step(params, grads, state, self.lr)
            self.loss_history_.append((it, loss))
            if it % self.log_every == 0:
                log.info("lrm iter %d contrastive %.5f", it, loss)
        self.params_ = params
        self.dim_z_ = Z.shape[1]
        return self

    @classmethod
    def from_params(cls, params, **kw) -> "LatentRewardModel":
        m = cls(**kw)
        m.params_ = ParamSet(params)
        m.dim_z_ = m.params_["enc.0.W"].shape[0]
        return m

    def reward(self, Z, cond, params=None) -> np.ndarray:
        check_is_fitted(self, "params_")
        Z = check_matrix(Z, self.dim_z_, "Z")
        cond = check_labels(cond, self.n_classes, Z.shape[0], allow_null=True)
        p = self.params_ if params is None else params
        with ad.no_grad():
            return lrm_reward_tensor(p.constants(), Tensor(Z), cond, self.cos_scale).data

    def predict(self, Z):
        """Most rewarded condition for every latent."""
        scores = np.stack([self.reward(Z, np.full(len(Z), c)) for c in range(self.n_classes)], axis=1)
        return np.argmax(scores, axis=1)

    def prefer(self, z_i, z_j, cond) -> np.ndarray:
        return self.reward(z_i, cond) >= self.reward(z_j, cond)

    def objective(self, params=None):
        """Batch-mean proxy reward of student outputs with the proxy held fixed."""
        holder = self if params is None else None
        fixed = params

        def obj(z1, cond):
            p = holder.params_ if holder is not None else fixed
            return ad.mean(lrm_reward_tensor(p.constants(), z1, cond, self.cos_scale))
        return obj


def lrm_reward(lrm: LatentRewardModel, z, cond) -> np.ndarray:
    return lrm.reward(z, cond)


def pretrain_lrm(codec, dataset, config=None, **overrides) -> LatentRewardModel:
    kw = {} if config is None else config.lrm_kwargs()
    kw.update(overrides)
    return LatentRewardModel(**kw).fit(codec.transform(dataset.X_train), dataset.y_train)


@dataclass
class LrmFinetune:
    """State of the proxy finetuning that runs alongside the student updates."""
    lrm: LatentRewardModel
    rm: object
    codec: object
    lr: float
    batch_size: int
    tau_l: float = 1.0
    tau_e: float = 1.0
    eps_real: float = 0.0

    def __post_init__(self):
        self.state = ad.adam_init(self.lrm.params_)

    def __call__(self, it, batch, terms):
        b = min(self.batch_size, batch.z.shape[0])
        triplet = (batch.z[:b], terms.z1.data[:b], terms.z2[:b])
        cond = batch.cond[:b]
        loss, grads = ad.value_and_grad(
            lambda q: lrm_loss(q, triplet, cond, self.rm, self.codec, self.tau_l, self.tau_e,
                               self.eps_real, self.lrm.cos_scale), self.lrm.params_)
        check_finite(loss, "rg-lrm", it, "lrm loss")
        self.lrm.params_, self.state = ad.adam_step(self.lrm.params_, grads, self.state, self.lr)
        return loss


def distill_rg_lcd_lrm(config, teacher, codec, rm, dataset, lrm, seed=None, beta=None):
    """Student guided by the proxy (held fixed within each step) while the proxy
    is finetuned toward the expert's preferences on (real, student, target) triplets.

    Returns ``(DistillResult, finetuned LatentRewardModel)``; the input ``lrm``
    is not modified.
    """
    beta = config.beta if beta is None else beta
    proxy = LatentRewardModel.from_params(lrm.params_.copy(), **lrm.get_params())
    ft = LrmFinetune(proxy, rm, codec, config.lrm.lr, config.lrm.batch_size,
                     config.lrm.tau_l, config.lrm.tau_e, config.lrm.eps_real)
    model = ConsistencyModel.from_teacher(teacher, config.cm.sigma_data)
    Z = codec.transform(dataset.X_train)
    res = distill_loop(model, teacher, Z, dataset.y_train, reward=proxy.objective(), beta=beta,
                       on_step=ft, stage="rg-lrm", **config.distill_kwargs(seed))
    return res, proxy
