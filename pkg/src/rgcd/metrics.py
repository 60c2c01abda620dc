"""Sample-quality and reward metrics."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .rng import Rng


def random_directions(n_proj: int, dim: int, seed: int) -> np.ndarray:
    """Unit directions; direction ``i`` depends only on ``(seed, i)``."""
    dirs = np.empty((n_proj, dim))
    for i in range(n_proj):
        v = Rng(seed, f"sw.{i}").normal(dim)
        dirs[i] = v / np.linalg.norm(v)
    return dirs


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact W1 between two 1-D empirical distributions (any sizes)."""
    a, b = np.sort(a), np.sort(b)
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # integrate |F_a^{-1} - F_b^{-1}| over the merged quantile grid
    qs = np.union1d(np.arange(1, a.size) / a.size, np.arange(1, b.size) / b.size)
    qs = np.concatenate([[0.0], qs, [1.0]])
    mid = 0.5 * (qs[:-1] + qs[1:])
    ia = np.minimum((mid * a.size).astype(np.int64), a.size - 1)
    ib = np.minimum((mid * b.size).astype(np.int64), b.size - 1)
    return float(np.sum(np.diff(qs) * np.abs(a[ia] - b[ib])))


def sliced_wasserstein(A, B, n_proj: int = 64, seed: int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over ``n_proj`` seeded random directions."""
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape} vs {B.shape}")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("sample sets must be nonempty")
    dirs = random_directions(n_proj, A.shape[1], seed)
    pa, pb = A @ dirs.T, B @ dirs.T
    return float(np.mean([wasserstein_1d(pa[:, i], pb[:, i]) for i in range(n_proj)]))


def blind_energy(X, P) -> float:
    """Mean squared norm of the component of ``X`` orthogonal to the rows of ``P``."""
    X = np.asarray(X, dtype=np.float64)
    resid = X - (X @ P.T) @ P
    return float(np.mean(np.sum(resid ** 2, axis=1)))


def oos_energy(samples, P, reference) -> float:
    """Out-of-subspace energy of ``samples`` relative to ``reference`` data."""
    return blind_energy(samples, P) / blind_energy(reference, P)


@dataclass
class MetricsRecord:
    run_id: str
    mode: str
    beta: float
    steps: int
    iteration: int
    sliced_wasserstein: float
    mean_expert_reward: float
    mean_lrm_reward: float
    oos_energy_ratio: float
    self_consistency_gap: float
    lrm_expert_agreement: float

    @classmethod
    def header(cls):
        return [f.name for f in fields(cls)]

    def row(self):
        return [_fmt(v) for v in asdict(self).values()]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def append_metrics(path, records) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(MetricsRecord.header())
        for r in records:
            w.writerow(r.row())


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    types = {f.name: f.type for f in fields(MetricsRecord)}
    out = []
    for r in rows:
        kw = {}
        for k, v in r.items():
            t = types[k]
            kw[k] = float(v) if t in ("float", float) else int(v) if t in ("int", int) else v
        out.append(MetricsRecord(**kw))
    return out


def self_consistency_gap(model, Z, n_pairs: int = 512, seed: int = 0, omega: float = 0.0,
                         c_h: float = 1e-3, steps=None) -> float:
    """Mean pseudo-Huber distance between model outputs at two steps of one trajectory.

    Each pair shares a data latent and a noise direction; ``steps`` fixes both
    step indices (useful for boundary checks), otherwise two distinct steps are
    drawn uniformly from the grid.
    """
    from .consistency import huber_rows
    from .diffusion import perturb
    from . import autodiff as ad

    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = Rng(seed, "eval.gap")
    Z = np.asarray(Z, dtype=np.float64)
    z = Z[rng.choice(Z.shape[0], n_pairs)]
    cond = rng.integers(0, model.n_classes, n_pairs)
    noise = rng.normal(z.shape)
    N = model.schedule.n_steps
    if steps is None:
        n1 = rng.integers(1, N + 1, n_pairs)
        n2 = 1 + (n1 - 1 + rng.integers(1, N, n_pairs)) % N
    else:
        n1, n2 = np.full(n_pairs, steps[0]), np.full(n_pairs, steps[1])
    f1 = model(perturb(z, n1, noise, model.schedule), n1, cond, omega)
    f2 = model(perturb(z, n2, noise, model.schedule), n2, cond, omega)
    with ad.no_grad():
        return float(np.mean(huber_rows(ad.Tensor(f1), ad.Tensor(f2), c_h).data))


def pairwise_agreement(proxy, rm, codec, Z, cond, n_pairs: int = 1000, seed: int = 0) -> float:
    """Fraction of same-condition latent pairs on which proxy and expert pick the same winner."""
    Z, cond = np.asarray(Z, dtype=np.float64), np.asarray(cond)
    rng = Rng(seed, "eval.agree")
    c = rng.integers(0, rm.n_classes, n_pairs)
    members = [np.flatnonzero(cond == k) for k in range(rm.n_classes)]
    if any(m.size == 0 for m in members):
        raise ValueError("every condition needs at least one latent in the pool")
    sizes = np.array([members[k].size for k in c])
    pos = np.minimum((rng.uniform((n_pairs, 2)) * sizes[:, None]).astype(np.int64), sizes[:, None] - 1)
    i = np.array([members[k][p] for k, p in zip(c, pos[:, 0])])
    j = np.array([members[k][p] for k, p in zip(c, pos[:, 1])])
    expert = rm.prefer(codec.inverse_transform(Z[i]), codec.inverse_transform(Z[j]), c)
    return float(np.mean(proxy.prefer(Z[i], Z[j], c) == expert))


def evaluate_model(model, codec, dataset, rm, lrm=None, *, steps=(1, 2, 4), n_samples=2048,
                   n_proj=64, omega=0.0, n_pairs=512, n_agree_pairs=1000, c_h=1e-3, seed=0,
                   run_id="run", mode="lcd", beta=0.0, iteration=0):
    """One :class:`MetricsRecord` per sampling step count.

    Sample-based metrics use decoded samples against the held-out split;
    proxy-based fields are NaN when no latent reward model is supplied.
    """
    Z_test = codec.transform(dataset.X_test)
    gap = self_consistency_gap(model, Z_test, n_pairs, seed, omega, c_h)
    cond = np.arange(n_samples) % model.n_classes
    out = []
    for s in steps:
        z = model.sample(n_samples, s, omega, cond, seed)
        x = codec.inverse_transform(z)
        if lrm is not None:
            lrm_r = float(np.mean(lrm.reward(z, cond)))
            agree = pairwise_agreement(lrm, rm, codec, np.concatenate([z, Z_test]),
                                       np.concatenate([cond, dataset.y_test]), n_agree_pairs, seed)
        else:
            lrm_r = agree = math.nan
        out.append(MetricsRecord(
            run_id=run_id, mode=mode, beta=float(beta), steps=int(s), iteration=int(iteration),
            sliced_wasserstein=sliced_wasserstein(x, dataset.X_test, n_proj, seed),
            mean_expert_reward=float(np.mean(rm.score(x, cond))),
            mean_lrm_reward=lrm_r,
            oos_energy_ratio=oos_energy(x, rm.P, dataset.X_test),
            self_consistency_gap=gap,
            lrm_expert_agreement=agree,
        ))
    return out
