"""SVG figures for robustness sweeps (matplotlib, Agg backend)."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

AXIS_LABELS = {"jpeg": "JPEG quality", "blur": "Gaussian blur std (px)", "noise": "noise std"}


def plot_sweep(kind: str, runs: Sequence[Sequence[dict]], path, metrics=("ssim_render", "ssim_hidden")) -> None:
    """Mean curve per metric across ``runs`` with a band of 0.5 standard deviations.

    Each run is a list of sweep rows sharing the same ``param`` column.
    """
    if not runs or not runs[0]:
        raise ValueError("nothing to plot")
    params = np.array([r["param"] for r in runs[0]])
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for m in metrics:
        vals = np.array([[r[m] for r in run] for run in runs], dtype=np.float64)
        if np.all(np.isnan(vals)):
            continue
        mean = np.nanmean(vals, axis=0)
        half = 0.5 * np.nanstd(vals, axis=0)
        line, = ax.plot(params, mean, marker="o", label=m.replace("_", " "))
        if len(runs) > 1:
            ax.fill_between(params, mean - half, mean + half, color=line.get_color(), alpha=0.25)
    ax.set_xlabel(AXIS_LABELS.get(kind, kind))
    ax.set_ylabel("SSIM")
    ax.set_ylim(0.0, 1.05)
    if kind == "jpeg":
        ax.invert_xaxis()
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
