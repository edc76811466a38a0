"""Figures rendered next to the CSV outputs of a run directory."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _read(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_loss_curves(loss_csv, out_png) -> Path:
    rows = _read(loss_csv)
    epoch = np.array([int(r["epoch"]) for r in rows])
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for key, style in (("total", "-"), ("recon", "--"), ("score", ":"), ("kl", "-.")):
            vals = np.array([float(r[key]) for r in rows])
            if np.any(vals != 0):
                ax.plot(epoch, vals, style, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("objective per window")
        ax.legend(frameon=False)
        fig.savefig(out_png)
        plt.close(fig)
    return Path(out_png)


def plot_ablation(ablation_csv, out_png) -> Path:
    """Mean MSE and MAE per configuration, one bar group per row of the table."""
    rows = _read(ablation_csv)
    cells: dict[str, list] = {}
    for r in rows:
        label = f"{r['encoder']}/{r['score_model']}/{r['dual']}/{r['sampler']}"
        cells.setdefault(label, []).append((float(r["mse"]), float(r["mae"])))
    labels = list(cells)
    means = np.array([np.mean(cells[k], axis=0) for k in labels])
    x = np.arange(len(labels))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(max(5, 0.45 * len(labels) + 2), 3.4))
        ax.bar(x - 0.2, means[:, 0], 0.4, label="MSE")
        ax.bar(x + 0.2, means[:, 1], 0.4, label="MAE")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=60, ha="right")
        ax.set_ylabel("error (normalised units)")
        ax.legend(frameon=False)
        fig.savefig(out_png)
        plt.close(fig)
    return Path(out_png)


def plot_forecast(forecast_csv, out_png) -> Path:
    rows = _read(forecast_csv)
    series: dict[str, list] = {}
    for r in rows:
        series.setdefault(r["variable"], []).append((int(r["step"]), float(r["forecast"])))
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for name, pts in series.items():
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", ms=3, label=name)
        ax.set_xlabel("steps ahead")
        ax.set_ylabel("forecast")
        ax.legend(frameon=False, ncol=2)
        fig.savefig(out_png)
        plt.close(fig)
    return Path(out_png)


def render_run(run_dir) -> list[Path]:
    """Render a PNG beside each known CSV in ``run_dir``."""
    run_dir = Path(run_dir)
    made = []
    for name, fn in (("loss.csv", plot_loss_curves), ("ablation.csv", plot_ablation), ("forecast.csv", plot_forecast)):
        src = run_dir / name
        if src.exists():
            made.append(fn(src, src.with_suffix(".png")))
    return made
