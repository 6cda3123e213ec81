"""Figure rendering for analysis and report outputs.

Every plot goes straight to a file (Agg backend); nothing here opens a
window. Figures sit next to the CSV/JSON they visualize.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .redundancy import DistanceMatrix

_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp.png"
    fig.savefig(tmp, **_SAVE_KW)
    plt.close(fig)
    os.replace(tmp, path)


def plot_heatmap(matrix: DistanceMatrix, path) -> None:
    """Block-size-by-start-index heatmap of mean angular distance."""
    grid = np.full((matrix.m - 1, matrix.m), np.nan)
    for n in range(1, matrix.m):
        grid[n - 1, : matrix.m - n + 1] = matrix.rows[n]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    masked = np.ma.masked_invalid(grid)
    im = ax.imshow(masked, aspect="auto", origin="lower", cmap="viridis",
                   vmin=0.0, vmax=float(np.nanmax(grid)),
                   extent=(-0.5, matrix.m - 0.5, 0.5, matrix.m - 0.5))
    ax.set_xlabel("start index $\\ell$ (h_0 = embeddings)")
    ax.set_ylabel("block size n")
    title = f"mean angular distance ({matrix.source}"
    if matrix.dataset_id:
        title += f", {matrix.dataset_id}"
    ax.set_title(title + f", {matrix.sample_count} examples)")
    fig.colorbar(im, ax=ax, label="distance")
    fig.tight_layout()
    _save(fig, path)


def plot_loss(losses, lrs, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(len(losses)), losses, lw=0.9, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax2 = ax.twinx()
    ax2.plot(range(len(lrs)), lrs, lw=0.9, color="tab:orange", label="lr")
    ax2.set_ylabel("learning rate")
    handles = [plt.Line2D([], [], color="tab:blue", label="loss"),
               plt.Line2D([], [], color="tab:orange", label="lr")]
    ax.legend(handles=handles, loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def plot_degradation(rows, thresholds, path) -> None:
    """Delta-vs-drop curves, one line per (strategy, dataset, metric).

    rows: dicts with drop, strategy, dataset, metric, delta.
    """
    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    series = {}
    for r in rows:
        key = (r["strategy"], r["dataset"], r["metric"])
        series.setdefault(key, []).append((r["drop"], r["delta"]))
    for (strategy, dataset, metric), pts in sorted(series.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o", ms=3.5, lw=1.1,
                label=f"{strategy} / {dataset} / {metric}")
    metrics_present = {r["metric"] for r in rows}
    if "wer" in metrics_present and "wer" in thresholds:
        ax.axhline(thresholds["wer"], ls="--", lw=0.8, color="gray")
    if "bleu" in metrics_present and "bleu" in thresholds:
        ax.axhline(-thresholds["bleu"], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("drop fraction")
    ax.set_ylabel("relative degradation $\\Delta$")
    ax.set_title("degradation vs layers removed")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)
