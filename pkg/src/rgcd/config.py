"""Run configuration: flat ``section.key = value`` text with range checks.

Lines starting with ``#`` and blank lines are ignored.  Keys without a dot
belong to the top level (``seed``, ``log_every``).  Every key missing from the
file takes its documented default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

from .data import PRESETS

FULL_SCALE_LR = 1e-6       # student learning rate at text-to-image scale
FULL_SCALE_LRM_LR = 3.3e-6  # proxy finetuning rate at text-to-image scale


class ConfigError(ValueError):
    """A configuration key is unknown, malformed or out of range."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _f(default, lo=None, hi=None, lo_open=False, hi_open=False, choices=None, doc=""):
    return field(default=default, metadata=dict(lo=lo, hi=hi, lo_open=lo_open, hi_open=hi_open,
                                                 choices=choices, doc=doc))


@dataclass
class DataConfig:
    preset: str = _f("mixture-2d", choices=PRESETS)
    dim_x: int = _f(16, 4, 4096)
    n_classes: int = _f(2, 2, 64)
    n_train: int = _f(4096, 16, 10**7)
    n_test: int = _f(2048, 16, 10**7)
    seed: int = _f(0, 0, 2**64 - 1)


@dataclass
class CodecConfig:
    dim_z: int = _f(4, 1, 4096)
    hidden: int = _f(0, 0, 4096)
    iters: int = _f(2000, 0, 10**7)
    lr: float = _f(1e-2, 0.0, 1.0, lo_open=True)
    batch_size: int = _f(256, 1, 10**6)


@dataclass
class ScheduleConfig:
    n_steps: int = _f(50, 2, 100000)
    b_min: float = _f(2e-3, 0.0, 1.0, lo_open=True, hi_open=True)
    b_max: float = _f(0.3, 0.0, 1.0, lo_open=True, hi_open=True)


@dataclass
class TeacherConfig:
    hidden: tuple = _f((64, 64), 1, 4096)
    iters: int = _f(3000, 0, 10**7)
    lr: float = _f(2e-3, 0.0, 1.0, lo_open=True)
    batch_size: int = _f(256, 1, 10**6)
    p_uncond: float = _f(0.1, 0.0, 1.0)


@dataclass
class CmConfig:
    sigma_data: float = _f(0.5, 0.0, None, lo_open=True)
    c_h: float = _f(1e-3, 0.0, None, lo_open=True)
    k: int = _f(2, 1, 100000)
    mu_ema: float = _f(0.95, 0.0, 1.0)
    omega_min: float = _f(0.0, 0.0, 100.0)
    omega_max: float = _f(0.0, 0.0, 100.0)
    iters: int = _f(2000, 0, 10**7)
    lr: float = _f(1e-3, 0.0, 1.0, lo_open=True)
    batch_size: int = _f(256, 1, 10**6)


@dataclass
class RewardConfig:
    variant: str = _f("aligned", choices=("aligned", "projection", "preference"))
    beta: float = _f(math.nan, 0.0, 1e6, doc="nan selects the per-variant default")
    d_vis: int = _f(2, 1, 4096)
    scale: float = _f(math.nan, 0.0, None, lo_open=True, doc="nan selects dim_x")
    target_shift: float = _f(2.0, 0.0, 1e3)


@dataclass
class LrmConfig:
    hidden: tuple = _f((64,), 1, 4096)
    embed_dim: int = _f(16, 1, 4096)
    cos_scale: float = _f(5.0, 0.0, 1e3, lo_open=True)
    tau_l: float = _f(1.0, 0.0, None, lo_open=True)
    tau_e: float = _f(1.0, 0.0, None, lo_open=True)
    eps_real: float = _f(0.0, 0.0, 1e6)
    lr: float = _f(3e-3, 0.0, 1.0)
    batch_size: int = _f(64, 1, 10**6)
    pretrain_iters: int = _f(1000, 0, 10**7)
    pretrain_lr: float = _f(3e-3, 0.0, 1.0, lo_open=True)
    pretrain_batch_size: int = _f(256, 2, 10**6)


@dataclass
class EvalConfig:
    n_proj: int = _f(64, 1, 100000)
    n_samples: int = _f(2048, 1, 10**7)
    steps: tuple = _f((1, 2, 4), 1, 100000)
    omega: float = _f(0.0, 0.0, 100.0)
    n_pairs: int = _f(512, 1, 10**7)
    n_agree_pairs: int = _f(1000, 1, 10**7)


SECTIONS = {
    "data": DataConfig, "codec": CodecConfig, "schedule": ScheduleConfig,
    "teacher": TeacherConfig, "cm": CmConfig, "reward": RewardConfig,
    "lrm": LrmConfig, "eval": EvalConfig,
}


@dataclass
class RunConfig:
    seed: int = _f(0, 0, 2**64 - 1)
    log_every: int = _f(100, 1, 10**9)
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    cm: CmConfig = field(default_factory=CmConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    lrm: LrmConfig = field(default_factory=LrmConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # -- derived values ----------------------------------------------------------
    @property
    def beta(self) -> float:
        from .reward import DEFAULT_BETA
        b = self.reward.beta
        return DEFAULT_BETA[self.reward.variant] if math.isnan(b) else b

    @property
    def reward_scale(self) -> float:
        s = self.reward.scale
        return float(self.data.dim_x) if math.isnan(s) else s

    def dataset(self):
        from .data import make_dataset
        d = self.data
        return make_dataset(d.preset, d.n_train, d.n_test, d.dim_x, d.n_classes, d.seed)

    def codec_kwargs(self) -> dict:
        c = self.codec
        return dict(dim_z=c.dim_z, hidden=c.hidden, iters=c.iters, lr=c.lr,
                    batch_size=c.batch_size, log_every=self.log_every, seed=self.seed)

    def teacher_kwargs(self) -> dict:
        t, s = self.teacher, self.schedule
        return dict(n_classes=self.data.n_classes, hidden=tuple(t.hidden), n_steps=s.n_steps,
                    b_min=s.b_min, b_max=s.b_max, iters=t.iters, lr=t.lr,
                    batch_size=t.batch_size, p_uncond=t.p_uncond, log_every=self.log_every,
                    seed=self.seed)

    def lrm_kwargs(self) -> dict:
        m = self.lrm
        return dict(n_classes=self.data.n_classes, hidden=tuple(m.hidden), embed_dim=m.embed_dim,
                    cos_scale=m.cos_scale, iters=m.pretrain_iters, lr=m.pretrain_lr,
                    batch_size=m.pretrain_batch_size, log_every=self.log_every, seed=self.seed)

    def distill_kwargs(self, seed=None) -> dict:
        c = self.cm
        return dict(k=c.k, mu=c.mu_ema, c_h=c.c_h, omega_min=c.omega_min, omega_max=c.omega_max,
                    iters=c.iters, lr=c.lr, batch_size=c.batch_size,
                    seed=self.seed if seed is None else seed, log_every=self.log_every)

    # -- text form ---------------------------------------------------------------
    def items(self):
        """``(dotted key, value)`` pairs in a fixed order."""
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in SECTIONS:
                for g in fields(v):
                    yield f"{f.name}.{g.name}", getattr(v, g.name)
            else:
                yield f.name, v

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def with_overrides(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` overrides (double underscore for the dot)."""
        merged = dict(self.items())
        merged.update((k.replace("__", "."), v) for k, v in dotted.items())
        return parse_config("".join(f"{k} = {_format(v)}\n" for k, v in merged.items()))


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _meta_of(key):
    parts = key.split(".")
    if len(parts) == 1:
        section, name, cls = None, parts[0], RunConfig
    elif len(parts) == 2 and parts[0] in SECTIONS:
        section, name, cls = parts[0], parts[1], SECTIONS[parts[0]]
    else:
        raise ConfigError(key, "unknown key")
    for f in fields(cls):
        if f.name == name and f.name not in SECTIONS:
            return section, f
    raise ConfigError(key, "unknown key")


def _range_text(m) -> str:
    if m["choices"]:
        return "one of " + ", ".join(m["choices"])
    lo = "(-inf" if m["lo"] is None else ("(" if m["lo_open"] else "[") + repr(m["lo"])
    hi = "inf)" if m["hi"] is None else repr(m["hi"]) + (")" if m["hi_open"] else "]")
    return f"{lo}, {hi}"


def _check_scalar(key, v, m):
    if isinstance(v, float) and math.isnan(v) and "nan" in m["doc"]:
        return
    if m["choices"] is not None:
        if v not in m["choices"]:
            raise ConfigError(key, f"got {v!r}, allowed {_range_text(m)}")
        return
    if isinstance(v, float) and not math.isfinite(v):
        raise ConfigError(key, f"must be finite, allowed {_range_text(m)}")
    lo, hi = m["lo"], m["hi"]
    bad = (lo is not None and (v <= lo if m["lo_open"] else v < lo)) or \
          (hi is not None and (v >= hi if m["hi_open"] else v > hi))
    if bad:
        raise ConfigError(key, f"got {v!r}, allowed {_range_text(m)}")


def _parse_value(key, raw, f):
    kind = type(f.default)
    try:
        if kind is tuple:
            vals = tuple(int(x) for x in raw.split(",") if x.strip())
            if not vals:
                raise ValueError
            return vals
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, f = _meta_of(key)
        if key in seen:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        value = _parse_value(key, raw, f)
        items = value if isinstance(value, tuple) else (value,)
        for v in items:
            _check_scalar(key, v, f.metadata)
        if section is None:
            cfg = replace(cfg, **{f.name: value})
        else:
            setattr(cfg, section, replace(getattr(cfg, section), **{f.name: value}))
        seen.add(key)
    _check_relations(cfg)
    return cfg


def _check_relations(cfg: RunConfig) -> None:
    if cfg.cm.k >= cfg.schedule.n_steps:
        raise ConfigError("cm.k", f"needs k < schedule.n_steps = {cfg.schedule.n_steps}")
    if cfg.schedule.b_min > cfg.schedule.b_max:
        raise ConfigError("schedule.b_min", "must not exceed schedule.b_max")
    if cfg.cm.omega_min > cfg.cm.omega_max:
        raise ConfigError("cm.omega_min", "must not exceed cm.omega_max")
    if cfg.codec.dim_z >= cfg.data.dim_x:
        raise ConfigError("codec.dim_z", f"must be below data.dim_x = {cfg.data.dim_x}")
    if cfg.reward.d_vis >= cfg.data.dim_x:
        raise ConfigError("reward.d_vis", f"must be below data.dim_x = {cfg.data.dim_x}")


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read())
