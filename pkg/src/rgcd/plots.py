"""SVG figures for a run directory (byte-stable across reruns)."""
from __future__ import annotations

import glob
import os
import re
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import read_metrics  # noqa: E402
from .pipeline import read_samples, write_samples  # noqa: E402

_SAMPLE_RE = re.compile(r"^(?P<tag>.+)_steps(?P<steps>\d+)\.csv$")


def _save(fig, path):
    with matplotlib.rc_context({"svg.hashsalt": "rgcd", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def scatter_svg(path, X, cond, data_X=None, data_cond=None, title=""):
    """First two decoded coordinates, coloured by condition, real data underneath."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    if data_X is not None:
        ax.scatter(data_X[:, 0], data_X[:, 1], s=3, c="0.8", label="data", rasterized=False)
    for c in np.unique(cond):
        m = cond == c
        ax.scatter(X[m, 0], X[m, 1], s=3, label=f"c={c}")
    ax.set_xlabel("x0")
    ax.set_ylabel("x1")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=7, markerscale=3)
    _save(fig, path)


def ablation_svg(path, records):
    """Expert reward and sliced Wasserstein against beta, one line per (mode, steps)."""
    series = defaultdict(dict)
    for r in records:
        if r.mode != "teacher":
            series[(r.mode, r.steps)][r.beta] = r
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for (mode, steps), by_beta in sorted(series.items()):
        betas = sorted(by_beta)
        axes[0].plot(betas, [by_beta[b].mean_expert_reward for b in betas], marker="o",
                     label=f"{mode}, {steps} steps")
        axes[1].plot(betas, [by_beta[b].sliced_wasserstein for b in betas], marker="o")
    axes[0].set_xlabel("beta")
    axes[0].set_ylabel("mean expert reward")
    axes[1].set_xlabel("beta")
    axes[1].set_ylabel("sliced Wasserstein")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def emit_plots(out, data=None) -> list:
    """Write ``plots/<tag>/samples_<steps>.{csv,svg}`` and, when several beta values
    were evaluated, ``plots/ablation_beta.svg``.  Returns the written paths."""
    metrics_path = os.path.join(out, "metrics.csv")
    sample_files = sorted(glob.glob(os.path.join(out, "samples", "*_steps*.csv")))
    if not os.path.exists(metrics_path):
        raise FileNotFoundError(f"{metrics_path} is missing; run `rgcd eval` first")
    if not sample_files:
        raise FileNotFoundError(f"no sample dumps under {out}/samples; run `rgcd sample` first")
    written = []
    for f in sample_files:
        m = _SAMPLE_RE.match(os.path.basename(f))
        if m is None:
            continue
        tag, steps = m.group("tag"), int(m.group("steps"))
        X, cond = read_samples(f)
        dest = os.path.join(out, "plots", tag)
        os.makedirs(dest, exist_ok=True)
        csv_path = os.path.join(dest, f"samples_{steps}.csv")
        write_samples(csv_path, X, cond)
        svg_path = os.path.join(dest, f"samples_{steps}.svg")
        scatter_svg(svg_path, X, cond,
                    None if data is None else data.X_test, None if data is None else data.y_test,
                    f"{tag}, {steps} steps")
        written += [csv_path, svg_path]
    # keep the latest row per (mode, beta, steps)
    latest = {}
    for r in read_metrics(metrics_path):
        latest[(r.mode, r.beta, r.steps)] = r
    betas = {b for (mode, b, _) in latest if mode != "teacher"}
    if len(betas) > 1:
        path = os.path.join(out, "plots", "ablation_beta.svg")
        os.makedirs(os.path.dirname(path), exist_ok=True)
        ablation_svg(path, list(latest.values()))
        written.append(path)
    return written
