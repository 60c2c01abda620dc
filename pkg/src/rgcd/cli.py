"""``rgcd`` command line."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config

COMMANDS = ("pretrain-codec", "pretrain-teacher", "pretrain-lrm", "distill", "sample", "eval", "plot")

# which config field --iters overrides for each command
ITERS_KEY = {
    "pretrain-codec": "codec__iters",
    "pretrain-teacher": "teacher__iters",
    "pretrain-lrm": "lrm__pretrain_iters",
    "distill": "cm__iters",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgcd", description="Reward-guided latent consistency distillation lab.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", default="runs/default", help="run directory")
    p.add_argument("--beta", type=float, help="reward scale (distill) or filter (sample/eval)")
    p.add_argument("--mode", choices=pipeline.MODES, help="distillation variant")
    p.add_argument("--steps", type=int, default=4, help="sampling steps for `sample`")
    p.add_argument("--iters", type=int, help="override the training iterations of this stage")
    return p


def _setup_logging():
    level = os.environ.get("RGCD_LOG", "").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO}
    logging.basicConfig(level=levels.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iters is not None and args.command in ITERS_KEY:
        over[ITERS_KEY[args.command]] = args.iters
    return cfg.with_overrides(**over) if over else cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    cfg = resolve_config(args)
    out = args.out
    cmd = args.command
    if cmd == "pretrain-codec":
        print(pipeline.pretrain_codec(cfg, out))
    elif cmd == "pretrain-teacher":
        print(pipeline.pretrain_teacher(cfg, out))
    elif cmd == "pretrain-lrm":
        print(pipeline.pretrain_proxy(cfg, out))
    elif cmd == "distill":
        print(pipeline.distill(cfg, out, args.mode or "lcd", args.beta))
    elif cmd == "sample":
        if args.steps < 1:
            raise ValueError("--steps must be >= 1")
        for path in pipeline.sample(cfg, out, args.steps, args.mode, args.beta):
            print(path)
    elif cmd == "eval":
        for r in pipeline.evaluate(cfg, out, args.mode, args.beta):
            print(f"{r.run_id} steps={r.steps} sw={r.sliced_wasserstein:.4f} "
                  f"reward={r.mean_expert_reward:.4f} oos={r.oos_energy_ratio:.3f}")
    elif cmd == "plot":
        from .plots import emit_plots
        for path in emit_plots(out, cfg.dataset()):
            print(path)
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (pipeline.PrerequisiteError, ConfigError, CheckpointError, FileNotFoundError,
            ValueError, TypeError) as exc:
        print(f"rgcd: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
