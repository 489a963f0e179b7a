"""Static plot rendering for run reports (matplotlib, file output only)."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["plot_corruption_bars", "plot_scatter_45", "plot_feature_clouds"]


def plot_corruption_bars(rows: list, out_path) -> Path:
    """Grouped bars of baseline vs adapted accuracy per corruption."""
    out_path = Path(out_path)
    labels = [f"{r['corruption']}-s{r['severity']}" for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows) + 2), 4))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], [r["baseline_acc"] for r in rows], width, label="baseline")
    ax.bar([x + width / 2 for x in xs], [r["adapted_acc"] for r in rows], width, label="adapted")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_scatter_45(csv_path, out_path, value_label: str) -> Path:
    """Baseline-vs-adapted scatter with the 45-degree reference line."""
    out_path = Path(out_path)
    xs, ys, corrected = [], [], []
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            if row.get("flagged") == "True":
                continue
            xs.append(float(row["baseline_value"]))
            ys.append(float(row["adapted_value"]))
            corrected.append(row.get("corrected") == "True")
    fig, ax = plt.subplots(figsize=(5, 5))
    lim = max(xs + ys + [1e-6])
    ax.plot([0, lim], [0, lim], "k:", lw=1, label="45°")
    other = [not c for c in corrected]
    ax.scatter(
        [x for x, k in zip(xs, other) if k],
        [y for y, k in zip(ys, other) if k],
        s=8, alpha=0.5, label="unchanged",
    )
    ax.scatter(
        [x for x, k in zip(xs, corrected) if k],
        [y for y, k in zip(ys, corrected) if k],
        s=8, alpha=0.6, color="tab:orange", label="corrected",
    )
    ax.set_xlabel(f"baseline {value_label}")
    ax.set_ylabel(f"adapted {value_label}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_feature_clouds(csv_path, out_path) -> Path:
    """2x2 panel of feature clouds: route (rows) x domain (columns)."""
    out_path = Path(out_path)
    points = {}
    with open(csv_path) as f:
        for row in csv.DictReader(f):
            key = (row["route"], row["domain"])
            points.setdefault(key, []).append(
                (float(row["x"]), float(row["y"]), int(row["label"]))
            )
    routes = ("baseline", "adapted")
    domains = ("source", "target")
    fig, axes = plt.subplots(2, 2, figsize=(9, 9))
    for i, route in enumerate(routes):
        for j, domain in enumerate(domains):
            ax = axes[i][j]
            pts = points.get((route, domain), [])
            if pts:
                xs, ys, labels = zip(*pts)
                ax.scatter(xs, ys, c=labels, cmap="tab10", s=6, alpha=0.6)
            ax.set_title(f"{route} / {domain}")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
