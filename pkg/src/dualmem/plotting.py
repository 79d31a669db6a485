"""Figures and delimited tables written next to the JSON reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402
from .hierarchy import HierarchyReport  # noqa: E402

# fixed metadata keeps the PNG bytes independent of the matplotlib build date
_PNG_META = {"Software": None}


def write_eval_csv(report: EvalReport, path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "count", "correct", "score"])
        for name, row in report.categories().items():
            w.writerow([name, row["count"], row["correct"], f"{row['score']:.6f}"])
        w.writerow(["overall", len(report.records), sum(r.score for r in report.records),
                    f"{report.overall:.6f}"])
    return path


def plot_eval(report: EvalReport, path: Path) -> Path:
    cats = report.categories()
    names = list(cats) + ["overall"]
    scores = [cats[n]["score"] for n in cats] + [report.overall]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names)), 3.2))
    bars = ax.bar(range(len(names)), scores, color=["0.55"] * len(cats) + ["0.2"])
    for bar, score in zip(bars, scores):
        ax.text(bar.get_x() + bar.get_width() / 2, score + 1.5, f"{score:.1f}", ha="center", fontsize=8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 110)
    ax.set_ylabel("judge score (%)")
    ax.set_title(f"route={report.config.get('route')}  k={report.config.get('k')}", fontsize=9)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def write_hierarchy_csv(report: HierarchyReport, path: Path) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "input_nodes", "categories", "promoted", "retried"])
        for lr in report.layers:
            w.writerow([lr.layer, lr.input_nodes, lr.categories, lr.promoted, lr.retried])
    return path


def plot_hierarchy(report: HierarchyReport, path: Path, base_count: int) -> Path:
    layers = [0] + [lr.layer for lr in report.layers]
    counts = [base_count] + [lr.categories for lr in report.layers]
    promoted = [0] + [lr.promoted for lr in report.layers]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.barh(layers, counts, color="0.6", label="nodes")
    ax.barh(layers, promoted, color="0.25", label="promoted")
    ax.set_yticks(layers)
    ax.set_ylabel("layer")
    ax.set_xlabel("node count")
    ax.set_title(f"n={report.compression_ratio}  stop: {report.termination}", fontsize=9)
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path
