"""PNG figure rendering for the report path.

All plotting lives here, on the CLI side: the metric library emits only
delimited data, and these renderers consume the same structures it
exports, writing figures next to the CSV/JSONL output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from tempoground.evalmetrics import MetricReport, StabilityCounts


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def metric_summary_figure(report: MetricReport, path: Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    names = [f"R@{m:g}" for m in sorted(report.r_at)]
    ax1.bar(names, [report.r_at[m] for m in sorted(report.r_at)], color="#4878d0")
    ax1.set_ylim(0, 1)
    ax1.set_title("Recall at IoU threshold")
    stages = ["Retrieve@K", "Cited", "Refined"]
    values = [report.retrieve_at_k, report.cited_miou, report.refined_miou]
    ax2.bar(stages, values, color=["#bcbcbc", "#ee854a", "#6acc64"])
    ax2.set_ylim(0, 1)
    ax2.set_title("Stage-wise mean IoU")
    for ax in (ax1, ax2):
        ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def histogram_figure(rows: list[tuple[float, float, int, float]], title: str, xlabel: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    lefts = [r[0] for r in rows]
    widths = [r[1] - r[0] for r in rows]
    ax.bar(lefts, [r[3] for r in rows], width=widths, align="edge", color="#4878d0", edgecolor="none")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def stability_figure(counts: StabilityCounts, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    labels = ["consistent\nmiss"] + [f"collapse\n{b}" for b in counts.stochastic_collapse] + ["stable\nnonzero"]
    values = [counts.consistent_miss, *counts.stochastic_collapse.values(), counts.stable_nonzero]
    colors = ["#d65f5f"] + ["#ee854a"] * len(counts.stochastic_collapse) + ["#6acc64"]
    ax.bar(labels, values, color=colors)
    ax.set_ylabel("queries")
    ax.set_title("Repeated-decode failure decomposition")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def pca_figure(csv_paths: dict[str, Path], path: Path) -> Path:
    """Side-by-side scatter of projection CSVs (e.g. raw vs encoded)."""
    fig, axes = plt.subplots(1, len(csv_paths), figsize=(4 * len(csv_paths), 3.4), squeeze=False)
    for ax, (label, csv_path) in zip(axes[0], csv_paths.items()):
        pc1, pc2, inside = [], [], []
        with open(csv_path, newline="") as f:
            for row in csv.DictReader(f):
                pc1.append(float(row["pc1"]))
                pc2.append(float(row["pc2"]))
                inside.append(int(row["inside_flag"]))
        inside_arr = np.array(inside, dtype=bool)
        pc1 = np.array(pc1)
        pc2 = np.array(pc2)
        ax.scatter(pc1[~inside_arr], pc2[~inside_arr], s=12, c="#4878d0", label="outside")
        ax.scatter(pc1[inside_arr], pc2[inside_arr], s=12, c="#ee854a", label="inside")
        ax.set_title(label)
        ax.legend(fontsize=8)
    return _save(fig, path)


def loss_curve_figure(csv_path: Path, columns: list[str], path: Path) -> Path:
    rows: dict[str, list[float]] = {c: [] for c in ["step", *columns]}
    with open(csv_path, newline="") as f:
        for row in csv.DictReader(f):
            for c in rows:
                rows[c].append(float(row[c]))
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    for c in columns:
        ax.plot(rows["step"], rows[c], label=c)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)
