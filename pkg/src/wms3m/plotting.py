"""Figures rendered next to the CSV/JSON reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def forecast_overlay(path, timestamps, truth, pred, lower, upper, label: str = "target",
                     max_points: int = 500) -> Path:
    """Truth vs predicted mean with the MC interval band."""
    n = min(len(timestamps), max_points)
    ts = np.asarray(timestamps)[:n]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 3.2))
        ax.fill_between(ts, np.asarray(lower)[:n], np.asarray(upper)[:n], color="C0", alpha=0.2,
                        lw=0, label="interval")
        ax.plot(ts, np.asarray(truth)[:n], color="k", lw=1.0, label="observed")
        ax.plot(ts, np.asarray(pred)[:n], color="C0", lw=1.0, label="predicted")
        ax.set_xlabel("period")
        ax.set_ylabel(label)
        ax.legend(loc="upper right", ncol=3)
        return _save(fig, path)


def whatif_figure(path, results: Sequence, kpi_names: Sequence[str] = ()) -> Path:
    """Total reward per scenario plus per-step reward and PRB trajectories."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        labels = [r.label for r in results]
        totals = [r.total for r in results]
        colors = [f"C{i}" for i in range(len(results))]
        axes[0].barh(labels, totals, color=colors)
        axes[0].axvline(0.0, color="k", lw=0.6)
        axes[0].invert_yaxis()
        axes[0].set_xlabel("total reward")
        for r, c in zip(results, colors):
            steps = np.arange(1, len(r.rewards) + 1)
            axes[1].plot(steps, r.rewards, marker="o", ms=3, color=c, label=r.label)
            axes[2].plot(steps, r.actions, marker="o", ms=3, color=c)
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("reward")
        axes[1].legend(fontsize=7)
        axes[2].set_xlabel("step")
        axes[2].set_ylabel("PRB")
        return _save(fig, path)


def latency_figure(path, lengths, latencies, fits: dict | None = None) -> Path:
    """Per-window latency against window length with optional fitted curves."""
    L = np.asarray(lengths, dtype=float)
    y = np.asarray(latencies, dtype=float) * 1e3
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(L, y, "o", color="k", label="measured")
        grid = np.linspace(L.min(), L.max(), 100)
        for name, coef in (fits or {}).items():
            if coef is None:
                continue
            ax.plot(grid, np.polyval(coef, grid) * 1e3, lw=1.0, label=name)
        ax.set_xlabel("window length L")
        ax.set_ylabel("latency per window (ms)")
        ax.legend()
        return _save(fig, path)
