"""Attainment-versus-axis plot for sweep results."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {"rate_scale": "Rate scale", "slo_scale": "SLO scale", "cv": "CV",
               "executors": "Executors"}


def plot_sweep(rows: Sequence[Mapping], path: str | Path, metric: str = "slo_attainment") -> Path:
    path = Path(path)
    axis = rows[0]["axis"] if rows else "value"
    fig, ax = plt.subplots(figsize=(5, 3.4), dpi=120)
    for sched in dict.fromkeys(r["scheduler"] for r in rows):
        pts = sorted((float(r["value"]), float(r[metric])) for r in rows if r["scheduler"] == sched)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=sched)
    ax.set_xlabel(AXIS_LABELS.get(axis, axis))
    ax.set_ylabel("SLO attainment" if metric == "slo_attainment" else metric)
    if metric.endswith("attainment"):
        ax.set_ylim(-0.02, 1.02)
        ax.axhline(0.9, color="grey", lw=0.8, ls="--")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
