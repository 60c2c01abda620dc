"""Deterministic autoencoder defining the latent space.

``LatentCodec`` is a scikit-learn transformer: ``transform`` encodes,
``inverse_transform`` decodes.  After fitting, latents are standardised per
dimension (the shift/scale is folded into the codec) so the diffusion prior
``N(0, I)`` matches the latent data scale.
"""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .layers import dense, init_dense, row_sq_norm
from .rng import Rng
from .validation import check_finite, check_matrix

log = logging.getLogger(__name__)


class LatentCodec(TransformerMixin, BaseEstimator):
    """Affine (``hidden=0``) or one-hidden-layer SiLU autoencoder.

    Parameters
    ----------
    dim_z : int
        Latent width.  Must not exceed the data width.
    hidden : int
        Hidden width of encoder and decoder; 0 gives a purely affine codec.
    init : {"random", "identity"}
        ``"identity"`` requires ``dim_z == n_features`` and ``hidden == 0``.
    """

    def __init__(self, dim_z=4, hidden=0, iters=2000, lr=1e-2, batch_size=256,
                 init="random", standardize=True, log_every=100, seed=0):
        self.dim_z = dim_z
        self.hidden = hidden
        self.iters = iters
        self.lr = lr
        self.batch_size = batch_size
        self.init = init
        self.standardize = standardize
        self.log_every = log_every
        self.seed = seed

    # -- parameters -----------------------------------------------------------
    def _init_params(self, dim_x, rng):
        p = ParamSet()
        if self.init == "identity":
            if self.dim_z != dim_x or self.hidden:
                raise ValueError("identity init needs dim_z == dim_x and hidden == 0")
            p["enc.0.W"], p["enc.0.b"] = np.eye(dim_x), np.zeros(dim_x)
            p["dec.0.W"], p["dec.0.b"] = np.eye(dim_x), np.zeros(dim_x)
            return p
        if self.hidden:
            init_dense(p, rng, "enc.0", dim_x, self.hidden)
            init_dense(p, rng, "enc.1", self.hidden, self.dim_z)
            init_dense(p, rng, "dec.0", self.dim_z, self.hidden)
            init_dense(p, rng, "dec.1", self.hidden, dim_x)
        else:
            init_dense(p, rng, "enc.0", dim_x, self.dim_z)
            init_dense(p, rng, "dec.0", self.dim_z, dim_x)
        return p

    @staticmethod
    def _encode(p, x):
        if "enc.1.W" in p:
            return dense(p, "enc.1", dense(p, "enc.0", x, "silu"))
        return dense(p, "enc.0", x)

    @staticmethod
    def _decode(p, z):
        if "dec.1.W" in p:
            return dense(p, "dec.1", dense(p, "dec.0", z, "silu"))
        return dense(p, "dec.0", z)

    def _recon_loss(self, p, x):
        return ad.mean(row_sq_norm(ad.sub(self._decode(p, self._encode(p, x)), x)))

    # -- fitting --------------------------------------------------------------
    def fit(self, X, y=None):
        X = check_matrix(X)
        if self.dim_z > X.shape[1]:
            raise ValueError("dim_z must not exceed the data dimension")
        rng = Rng(self.seed, "codec")
        params = self._init_params(X.shape[1], rng.child("init"))
        state = ad.adam_init(params)
        batch_rng = rng.child("batches")
        self.loss_history_ = []
        for it in range(self.iters + 1):
            if it % self.log_every == 0 or it == self.iters:
                with ad.no_grad():
                    full = float(self._recon_loss(params.constants(), Tensor(X)).data)
                check_finite(full, "codec", it)
                self.loss_history_.append((it, full))
                log.info("codec iter %d recon %.6f", it, full)
            if it == self.iters:
                break
            xb = X[batch_rng.choice(X.shape[0], min(self.batch_size, X.shape[0]))]
            loss, grads = ad.value_and_grad(lambda q: self._recon_loss(q, Tensor(xb)), params)
            check_finite(loss, "codec", it)
            params, state = ad.adam_step(params, grads, state, self.lr)
        self.n_features_in_ = X.shape[1]
        self.params_ = params
        self._set_standardization(X)
        return self

    def _set_standardization(self, X):
        with ad.no_grad():
            Z = self._encode(self.params_.constants(), Tensor(X)).data
        if self.standardize:
            shift, scale = Z.mean(axis=0), Z.std(axis=0)
            scale = np.where(scale > 0, scale, 1.0)
        else:
            shift, scale = np.zeros(Z.shape[1]), np.ones(Z.shape[1])
        self.params_["lat.shift"] = shift
        self.params_["lat.scale"] = scale

    # -- differentiable maps -------------------------------------------------
    def encode_tensor(self, x, params=None) -> Tensor:
        p = self.params_.constants() if params is None else params
        return ad.div(ad.sub(self._encode(p, x), p["lat.shift"]), p["lat.scale"])

    def decode_tensor(self, z, params=None) -> Tensor:
        """Decoder as a graph node; gradients flow into ``z`` (and ``params`` if leaves)."""
        check_is_fitted(self, "params_")
        p = self.params_.constants() if params is None else params
        return self._decode(p, ad.add(ad.mul(z, p["lat.scale"]), p["lat.shift"]))

    def decode_detached(self, z) -> Tensor:
        """Same value as :meth:`decode_tensor`, but no gradient reaches ``z`` or the decoder."""
        with ad.no_grad():
            return self.decode_tensor(ad.detach(z))

    # -- sklearn surface ----------------------------------------------------
    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_matrix(X, self.n_features_in_)
        with ad.no_grad():
            return self.encode_tensor(Tensor(X)).data.copy()

    def inverse_transform(self, Z):
        check_is_fitted(self, "params_")
        Z = check_matrix(Z, self.dim_z, "Z")
        with ad.no_grad():
            return self.decode_tensor(Tensor(Z)).data.copy()

    def reconstruction_mse(self, X) -> float:
        X = check_matrix(X, self.n_features_in_)
        return float(np.mean(np.sum((self.inverse_transform(self.transform(X)) - X) ** 2, axis=1)))

    @classmethod
    def from_params(cls, params: ParamSet, **kw) -> "LatentCodec":
        codec = cls(**kw)
        codec.params_ = ParamSet(params)
        codec.n_features_in_ = params["dec.1.b" if "dec.1.b" in params else "dec.0.b"].shape[0]
        return codec


def train_codec(X, config=None, **overrides) -> LatentCodec:
    kw = {} if config is None else config.codec_kwargs()
    kw.update(overrides)
    return LatentCodec(**kw).fit(X)


def encode(codec: LatentCodec, X) -> np.ndarray:
    return codec.transform(X)


def decode(codec: LatentCodec, Z) -> np.ndarray:
    return codec.inverse_transform(Z)


def decode_detached(codec: LatentCodec, z) -> Tensor:
    return codec.decode_detached(z)
