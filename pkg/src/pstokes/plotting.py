"""Static figures rendered from the delimited run outputs.

Every figure is generated from a CSV written by the experiments module,
never from in-memory state, so plots can be regenerated after the fact
from the run directory alone.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .experiments import read_history_csv

__all__ = ["convergence_figure", "surface_figure", "sweep_figure", "study_figure"]


def _finish(fig, ax, out_png: Path) -> Path:
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def convergence_figure(iterations_csv: Path, out_png: Path) -> Path:
    cols = read_history_csv(iterations_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(cols["k"], cols["ries_rel"], "o-", ms=3)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual norm")
    return _finish(fig, ax, out_png)


def surface_figure(surface_csv: Path, out_png: Path) -> Path:
    cols = read_history_csv(surface_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(cols["x"], cols["v_r"], "-", lw=1.2)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("surface speed (m/a)")
    return _finish(fig, ax, out_png)


def sweep_figure(combined_csv: Path, out_png: Path) -> Path:
    cols = read_history_csv(combined_csv)
    fig, ax = plt.subplots(figsize=(6, 4))
    for d in np.unique(cols["delta"]):
        sel = cols["delta"] == d
        ax.semilogy(cols["k"][sel], cols["ries_rel"][sel], "o-", ms=3, label=f"delta={d:g}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative residual norm")
    ax.legend()
    return _finish(fig, ax, out_png)


def study_figure(study_csv: Path, out_png: Path) -> Path:
    cols = read_history_csv(study_csv)
    sel = cols["distance2"] > 0
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(cols["bound"][sel], cols["distance2"][sel], "o-")
    ax.set_xlabel("combined regularization bound")
    ax.set_ylabel("squared H1 distance to reference")
    return _finish(fig, ax, out_png)
