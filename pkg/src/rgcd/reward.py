"""Expert reward models on decoded samples and direct reward-guided distillation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .consistency import ConsistencyModel, distill_loop, lcd_terms
from .rng import Rng
from .validation import check_labels, check_matrix

VARIANTS = ("aligned", "projection", "preference")
# reward scale per expert family: alignment-style 5.0, preference-style 1.0
DEFAULT_BETA = {"aligned": 5.0, "projection": 1.0, "preference": 1.0}


@dataclass
class ExpertRM:
    """Quadratic expert around per-class targets ``m_c``.

    ``aligned``: ``-||x - m_c||^2 / s``; ``projection``: ``-||P (x - m_c)||^2 / s``
    (blind to the orthogonal complement of the rows of ``P``); ``preference``:
    only :meth:`prefer` is available, backed by the aligned reward.
    """
    variant: str
    targets: np.ndarray
    scale: float
    P: np.ndarray

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown expert variant {self.variant!r}; expected one of {VARIANTS}")
        if self.scale <= 0:
            raise ValueError("reward scale must be positive")

    @property
    def n_classes(self) -> int:
        return self.targets.shape[0]

    @property
    def differentiable(self) -> bool:
        return self.variant != "preference"

    def _hidden(self, x, cond) -> Tensor:
        diff = ad.sub(x, self.targets[cond])
        if self.variant == "projection":
            diff = ad.matmul(diff, self.P.T)
        return ad.div(ad.neg(ad.sum(ad.square(diff), axis=1)), self.scale)

    def reward_tensor(self, x, cond) -> Tensor:
        """Per-row reward as a graph node (differentiable in ``x``)."""
        if not self.differentiable:
            raise TypeError("the preference-only expert has no reward values; use prefer()")
        return self._hidden(ad.as_tensor(x), check_labels(cond, self.n_classes, x.shape[0]))

    def reward(self, x, cond) -> np.ndarray:
        x = check_matrix(x, self.targets.shape[1], "x")
        with ad.no_grad():
            return self.reward_tensor(Tensor(x), cond).data

    def score(self, x, cond) -> np.ndarray:
        """Underlying reward values for evaluation, available for every variant."""
        x = check_matrix(x, self.targets.shape[1], "x")
        with ad.no_grad():
            return self._hidden(Tensor(x), check_labels(cond, self.n_classes, x.shape[0])).data

    def prefer(self, x_i, x_j, cond) -> np.ndarray:
        """``True`` where ``x_i`` is preferred (ties go to ``x_i``)."""
        x_j = check_matrix(x_j, self.targets.shape[1], "x_j")
        return self.score(x_i, cond) >= self.score(x_j, cond)


def projection_basis(dim_x: int, d_vis: int, seed: int) -> np.ndarray:
    """First ``d_vis`` rows of a seeded random orthonormal matrix."""
    if not 1 <= d_vis < dim_x:
        raise ValueError("d_vis must lie in [1, dim_x)")
    q, r = np.linalg.qr(Rng(seed, "reward.basis").normal((dim_x, dim_x)))
    q = q * np.sign(np.diag(r))
    return q[:, :d_vis].T.copy()


def make_expert(variant, class_means, d_vis=2, target_shift=1.0, scale=None, seed=0) -> ExpertRM:
    """Targets sit ``target_shift`` away from the class means inside the visible subspace."""
    class_means = np.asarray(class_means, dtype=np.float64)
    C, dim_x = class_means.shape
    P = projection_basis(dim_x, d_vis, seed)
    u = Rng(seed, "reward.targets").normal((C, d_vis))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    targets = class_means + target_shift * (u @ P)
    return ExpertRM(variant, targets, float(dim_x if scale is None else scale), P)


def expert_reward(rm: ExpertRM, x, cond) -> np.ndarray:
    return rm.reward(x, cond)


def expert_prefer(rm: ExpertRM, x_i, x_j, cond) -> np.ndarray:
    return rm.prefer(x_i, x_j, cond)


def expert_objective(rm: ExpertRM, codec):
    """Batch-mean expert reward of decoded student outputs, as used in the student loss."""
    if not rm.differentiable:
        raise TypeError("direct reward guidance needs a differentiable expert; use the latent proxy path")

    def objective(z1, cond):
        return ad.mean(rm.reward_tensor(codec.decode_tensor(z1), cond))
    return objective


def rg_lcd_loss(params, ema_params, teacher, codec, rm, beta, batch, k, c_h, model) -> Tensor:
    """``lcd - beta * J`` on one batch, ``J`` being the mean reward of the decoded student output."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    objective = expert_objective(rm, codec)
    terms = lcd_terms(model, params, ema_params, teacher, batch, k, c_h)
    return ad.sub(terms.loss, ad.mul(objective(terms.z1, batch.cond), beta))


def distill_rg_lcd(config, teacher, codec, rm, dataset, seed=None, beta=None, reward=None):
    """Reward-guided LCD.  ``reward`` overrides the expert objective (e.g. a frozen latent RM)."""
    beta = config.beta if beta is None else beta
    model = ConsistencyModel.from_teacher(teacher, config.cm.sigma_data)
    Z = codec.transform(dataset.X_train)
    objective = expert_objective(rm, codec) if reward is None else reward
    return distill_loop(model, teacher, Z, dataset.y_train, reward=objective, beta=beta,
                        stage="rg", **config.distill_kwargs(seed))
