"""Learning-curve figures and plain-text plot data."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "figure.figsize": (5.0, 3.2),
    "savefig.dpi": 150,
}

METRICS = {
    "mse": ("MSE", True),
    "recovery": ("atoms recovered", False),
}


def by_label(summary: Sequence[dict]) -> dict[str, list[dict]]:
    groups = defaultdict(list)
    for row in summary:
        groups[row["algo"]].append(row)
    return dict(groups)


def write_plot_data(out_dir, summary: Sequence[dict]) -> list[Path]:
    """One ``<label>_<metric>.dat`` file per curve: ``step value`` per line."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for label, rows in by_label(summary).items():
        for metric in METRICS:
            path = out_dir / f"{label}_{metric}.dat"
            with open(path, "w") as fh:
                fh.write(f"# step {metric}\n")
                for r in rows:
                    fh.write(f"{r['step']} {r[metric]!r}\n")
            written.append(path)
    return written


def new(**kw):
    with plt.rc_context(STYLE):
        return plt.subplots(**kw)


def save(fig, path) -> None:
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_figures(out_dir, summary: Sequence[dict], title: str = "") -> list[Path]:
    """``mse.png`` and ``recovery.png`` with one curve per label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = by_label(summary)
    written = []
    for metric, (ylabel, logy) in METRICS.items():
        fig, ax = new()
        for label, rows in groups.items():
            steps = [r["step"] for r in rows]
            vals = [r[metric] if math.isfinite(r[metric]) else math.nan for r in rows]
            if metric == "recovery":
                vals = [100.0 * v for v in vals]
            ax.plot(steps, vals, label=label)
        if logy and any(math.isfinite(r["mse"]) and r["mse"] > 0 for r in summary):
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel + (" (%)" if metric == "recovery" else ""))
        if title:
            ax.set_title(title)
        ax.legend()
        path = out_dir / f"{metric}.png"
        save(fig, path)
        written.append(path)
    return written
