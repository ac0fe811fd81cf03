"""Figures written next to the text/CSV reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

from .data import SCENARIOS  # noqa: E402
from .evaluation import SCENARIO_TITLES, EvalReport  # noqa: E402

STYLE = {
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "legend.fontsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    # keep PNG bytes stable across runs
    "svg.hashsalt": "multiscale-va",
}
COLORS = {"arousal": "#c0504d", "valence": "#4f81bd"}


def figsize(width: float = 6.0, ratio: float | None = None) -> tuple[float, float]:
    ratio = (math.sqrt(5) - 1) / 2 if ratio is None else ratio
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_report(report: EvalReport, path) -> Path:
    """Grouped bars of per-scenario RMSE with STD error bars."""
    scenarios = [s for s in SCENARIOS if s in report.rows and report.rows[s].folds]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        x = np.arange(len(scenarios))
        for i, dim in enumerate(("arousal", "valence")):
            means = [report.rows[s].mean(dim) for s in scenarios]
            stds = [report.rows[s].std(dim) for s in scenarios]
            ax.bar(x + (i - 0.5) * 0.38, means, 0.38, yerr=stds, capsize=3, label=dim.capitalize(),
                   color=COLORS[dim])
        ax.set_xticks(x)
        ax.set_xticklabels([SCENARIO_TITLES[s].replace(" scenario", "") for s in scenarios])
        ax.set_ylabel("RMSE")
        overall = report.overall_rmse
        if overall is not None:
            ax.axhline(overall, color="0.4", lw=0.8, ls="--", label=f"mean {overall:.3f}")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_training(train_loss, val_rmse, path) -> Path:
    """Per-epoch training MSE and validation RMSE."""
    epochs = np.arange(1, len(train_loss) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.plot(epochs, train_loss, marker="o", ms=3, label="train MSE")
        val = np.asarray(val_rmse, dtype=float)
        if np.isfinite(val).any():
            ax.plot(epochs, val, marker="s", ms=3, label="validation RMSE")
        ax.set_xlabel("epoch")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)
