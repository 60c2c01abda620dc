"""Run-directory stages behind the command line.

A run directory holds::

    base.ckpt                      codec, teacher, proxy RM, expert basis
    distill_<mode>_b<beta>.ckpt    one per distillation run
    samples/<tag>_steps<N>.csv     decoded samples
    metrics.csv                    evaluation rows
    plots/                         figures and their data
"""
from __future__ import annotations

import csv
import glob
import logging
import os

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import LatentCodec, train_codec
from .config import RunConfig, parse_config
from .consistency import ConsistencyModel, distill_lcd
from .diffusion import TeacherDenoiser, build_schedule, train_teacher
from .lrm import LatentRewardModel, distill_rg_lcd_lrm, pretrain_lrm
from .metrics import MetricsRecord, append_metrics, evaluate_model, oos_energy, sliced_wasserstein
from .reward import ExpertRM, distill_rg_lcd, make_expert

log = logging.getLogger(__name__)

MODES = ("lcd", "rg", "rg-lrm")


class PrerequisiteError(RuntimeError):
    def __init__(self, stage: str, needed_by: str):
        self.stage = stage
        super().__init__(f"{needed_by} needs the '{stage}' stage; run `rgcd {stage}` first")


STAGE_COMMAND = {"codec": "pretrain-codec", "teacher": "pretrain-teacher", "lrm": "pretrain-lrm"}


def base_path(out) -> str:
    return os.path.join(out, "base.ckpt")


def tag_for(mode: str, beta: float) -> str:
    return f"{mode}_b{beta:g}"


def distill_path(out, mode, beta) -> str:
    return os.path.join(out, f"distill_{tag_for(mode, beta)}.ckpt")


def load_base(out, need, needed_by) -> Checkpoint:
    path = base_path(out)
    if not os.path.exists(path):
        raise PrerequisiteError(STAGE_COMMAND[need[0]], needed_by)
    ckpt = load_checkpoint(path)
    for stage in need:
        if not ckpt.has(stage):
            raise PrerequisiteError(STAGE_COMMAND[stage], needed_by)
    return ckpt


# -- restoring estimators from blocks ---------------------------------------------

def restore_codec(ckpt) -> LatentCodec:
    return LatentCodec.from_params(ckpt.group("codec"), **ckpt.meta["codec"])


def restore_teacher(ckpt) -> TeacherDenoiser:
    kw = dict(ckpt.meta["teacher"])
    kw["hidden"] = tuple(kw["hidden"])
    t = TeacherDenoiser(**kw)
    t.params_ = ckpt.group("teacher")
    t.schedule_ = build_schedule(t.n_steps, t.b_min, t.b_max)
    t.dim_z_ = t.params_["out.b"].shape[0]
    return t


def restore_lrm(ckpt, prefix="lrm") -> LatentRewardModel:
    kw = dict(ckpt.meta["lrm"])
    kw["hidden"] = tuple(kw["hidden"])
    return LatentRewardModel.from_params(ckpt.group(prefix), **kw)


def restore_expert(ckpt, config: RunConfig) -> ExpertRM:
    g = ckpt.group("reward")
    return ExpertRM(config.reward.variant, g["targets"], config.reward_scale, g["P"])


def restore_model(dckpt, teacher) -> ConsistencyModel:
    return ConsistencyModel(dckpt.group("cm"), teacher.schedule_, teacher.n_classes,
                            dckpt.meta["sigma_data"], dckpt.group("cm_ema"))


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}


# -- stages ---------------------------------------------------------------------------

def pretrain_codec(config: RunConfig, out) -> str:
    os.makedirs(out, exist_ok=True)
    ds = config.dataset()
    codec = train_codec(ds.X_train, config)
    rm = make_expert(config.reward.variant, ds.class_means(), config.reward.d_vis,
                     config.reward.target_shift, config.reward_scale, config.data.seed)
    ckpt = Checkpoint(config.to_text())
    ckpt.put("codec", codec.params_)
    ckpt.put("reward", {"P": rm.P, "targets": rm.targets})
    ckpt.meta["codec"] = _jsonable(codec.get_params())
    ckpt.meta["codec_mse_test"] = codec.reconstruction_mse(ds.X_test)
    save_checkpoint(base_path(out), ckpt)
    return base_path(out)


def pretrain_teacher(config: RunConfig, out) -> str:
    ckpt = load_base(out, ["codec"], "pretrain-teacher")
    ds = config.dataset()
    codec = restore_codec(ckpt)
    teacher = train_teacher(config, codec.transform(ds.X_train), ds.y_train)
    ckpt.put("teacher", teacher.params_)
    ckpt.meta["teacher"] = _jsonable(teacher.get_params())
    save_checkpoint(base_path(out), ckpt)
    return base_path(out)


def pretrain_proxy(config: RunConfig, out) -> str:
    ckpt = load_base(out, ["codec"], "pretrain-lrm")
    ds = config.dataset()
    lrm = pretrain_lrm(restore_codec(ckpt), ds, config)
    ckpt.put("lrm", lrm.params_)
    ckpt.meta["lrm"] = _jsonable(lrm.get_params())
    save_checkpoint(base_path(out), ckpt)
    return base_path(out)


def distill(config: RunConfig, out, mode="lcd", beta=None) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    need = ["codec", "teacher"] + (["lrm"] if mode == "rg-lrm" else [])
    ckpt = load_base(out, need, f"distill --mode {mode}")
    beta = 0.0 if mode == "lcd" else (config.beta if beta is None else float(beta))
    if beta < 0:
        raise ValueError("beta must be non-negative")
    ds = config.dataset()
    codec, teacher = restore_codec(ckpt), restore_teacher(ckpt)
    rm = restore_expert(ckpt, config)
    dck = Checkpoint(config.to_text())
    if mode == "lcd":
        res = distill_lcd(config, teacher, codec, ds)
    elif mode == "rg":
        res = distill_rg_lcd(config, teacher, codec, rm, ds, beta=beta)
    else:
        res, proxy = distill_rg_lcd_lrm(config, teacher, codec, rm, ds, restore_lrm(ckpt), beta=beta)
        dck.put("lrm_ft", proxy.params_)
    dck.put("cm", res.model.params)
    dck.put("cm_ema", res.model.ema_params)
    dck.meta.update(mode=mode, beta=beta, seed=config.seed, sigma_data=config.cm.sigma_data,
                    iters=config.cm.iters, final_loss=float(np.mean(res.losses[-20:]))
                    if res.losses.size else float("nan"))
    path = distill_path(out, mode, beta)
    save_checkpoint(path, dck)
    return path


def _distill_runs(out, mode=None, beta=None):
    paths = sorted(glob.glob(os.path.join(out, "distill_*.ckpt")))
    if mode is not None:
        paths = [p for p in paths if os.path.basename(p).startswith(f"distill_{mode}_b")]
    if beta is not None:
        paths = [p for p in paths if p.endswith(f"_b{float(beta):g}.ckpt")]
    if not paths:
        raise PrerequisiteError("distill" + (f" --mode {mode}" if mode else ""), "this command")
    return paths


def _tag_of(path) -> str:
    return os.path.basename(path)[len("distill_"):-len(".ckpt")]


def sample(config: RunConfig, out, steps=4, mode=None, beta=None) -> list:
    base = load_base(out, ["codec", "teacher"], "sample")
    codec, teacher = restore_codec(base), restore_teacher(base)
    os.makedirs(os.path.join(out, "samples"), exist_ok=True)
    written = []
    n = config.eval.n_samples
    cond = np.arange(n) % teacher.n_classes
    for path in _distill_runs(out, mode, beta):
        model = restore_model(load_checkpoint(path), teacher)
        x = codec.inverse_transform(model.sample(n, steps, config.eval.omega, cond, config.seed))
        dest = os.path.join(out, "samples", f"{_tag_of(path)}_steps{steps}.csv")
        write_samples(dest, x, cond)
        written.append(dest)
    return written


def write_samples(path, X, cond) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition"] + [f"x{i}" for i in range(X.shape[1])])
        for c, row in zip(cond, X):
            w.writerow([int(c)] + [repr(float(v)) for v in row])


def read_samples(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    cond = np.array([int(r[0]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[1:]] for r in rows])
    return X, cond


def evaluate(config: RunConfig, out, mode=None, beta=None) -> list:
    """Append metrics rows for the teacher baseline and every selected distilled model."""
    base = load_base(out, ["codec", "teacher"], "eval")
    ds = config.dataset()
    codec, teacher = restore_codec(base), restore_teacher(base)
    rm = restore_expert(base, config)
    base_lrm = restore_lrm(base) if base.has("lrm") else None
    e = config.eval
    records = [teacher_record(config, teacher, codec, ds, rm)]
    for path in _distill_runs(out, mode, beta):
        dck = load_checkpoint(path)
        if dck.has("lrm_ft"):
            lrm = LatentRewardModel.from_params(dck.group("lrm_ft"), **base_lrm.get_params())
        else:
            lrm = base_lrm
        records += evaluate_model(
            restore_model(dck, teacher), codec, ds, rm, lrm, steps=e.steps, n_samples=e.n_samples,
            n_proj=e.n_proj, omega=e.omega, n_pairs=e.n_pairs, n_agree_pairs=e.n_agree_pairs,
            c_h=config.cm.c_h, seed=config.seed, run_id=_tag_of(path), mode=dck.meta["mode"],
            beta=dck.meta["beta"], iteration=dck.meta["iters"])
    append_metrics(os.path.join(out, "metrics.csv"), records)
    return records


def teacher_record(config, teacher, codec, ds, rm) -> MetricsRecord:
    e = config.eval
    n = e.n_samples
    cond = np.arange(n) % teacher.n_classes
    steps = teacher.n_steps
    x = codec.inverse_transform(teacher.sample(n, steps, e.omega, cond, config.seed))
    nan = float("nan")
    return MetricsRecord(
        run_id="teacher", mode="teacher", beta=0.0, steps=steps, iteration=teacher.iters,
        sliced_wasserstein=sliced_wasserstein(x, ds.X_test, e.n_proj, config.seed),
        mean_expert_reward=float(np.mean(rm.score(x, cond))), mean_lrm_reward=nan,
        oos_energy_ratio=oos_energy(x, rm.P, ds.X_test), self_consistency_gap=nan,
        lrm_expert_agreement=nan)


def config_from_base(out) -> RunConfig:
    return parse_config(load_checkpoint(base_path(out)).config_text)
