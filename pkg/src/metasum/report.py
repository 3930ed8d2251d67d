"""Figure and delimited-table rendering for experiment reports.

Everything draws through the Agg backend and writes to files; the report
CLI path emits PNG figures next to the CSV so a run directory is
self-describing.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import KIND_LABELS, AggregateReport, mean_precision  # noqa: E402
from .metadata import FeatureKind  # noqa: E402
from .text import CATEGORIES  # noqa: E402

FIG_RC = {
    "figure.dpi": 120,
    "savefig.bbox": "tight",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

_BAR_COLORS = ["#4878a8", "#d1605e", "#6aa56e", "#e8b04c", "#8d6cab", "#797979"]


def _kind_color(i: int) -> str:
    return _BAR_COLORS[i % len(_BAR_COLORS)]


def plot_rouge(reports: Dict[FeatureKind, AggregateReport], path) -> Path:
    """Grouped bars of seed-mean ROUGE-1/2/L F1 (x100) per model."""
    metrics = ["R-1", "R-2", "R-L"]
    with plt.rc_context(FIG_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.2))
        kinds = list(reports)
        width = 0.8 / max(1, len(kinds))
        for i, kind in enumerate(kinds):
            rep = reports[kind].mean
            vals = [rep.rouge1.f1 * 100, rep.rouge2.f1 * 100, rep.rougeL.f1 * 100]
            xs = [j + i * width for j in range(len(metrics))]
            ax.bar(xs, vals, width=width, label=KIND_LABELS[kind],
                   color=_kind_color(i))
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(metrics))])
        ax.set_xticklabels(metrics)
        ax.set_ylabel("F1 x100")
        ax.set_title("Summarization scores by encoded metadata")
        ax.legend(ncol=2)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_word_precision(reports: Dict[FeatureKind, AggregateReport], path) -> Path:
    """Grouped bars of category-wise generated-word precision per model."""
    with plt.rc_context(FIG_RC):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        kinds = list(reports)
        width = 0.8 / max(1, len(kinds))
        for i, kind in enumerate(kinds):
            vals = []
            for cat in CATEGORIES:
                p = mean_precision(reports[kind].per_seed, cat)
                vals.append(0.0 if p is None else p * 100)
            xs = [j + i * width for j in range(len(CATEGORIES))]
            ax.bar(xs, vals, width=width, label=KIND_LABELS[kind],
                   color=_kind_color(i))
        ax.set_xticks([j + 0.4 - width / 2 for j in range(len(CATEGORIES))])
        ax.set_xticklabels(CATEGORIES)
        ax.set_ylabel("precision x100")
        ax.set_title("Generated words found in the gold summary")
        ax.legend(ncol=2)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_training_curves(metrics: Dict[str, List[dict]], path) -> Path:
    """Per-run train loss and validation ROUGE-1 against epoch."""
    with plt.rc_context(FIG_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        for i, (label, records) in enumerate(sorted(metrics.items())):
            epochs = [r["epoch"] for r in records]
            ax1.plot(epochs, [r["train_loss"] for r in records],
                     label=label, color=_kind_color(i % 6), alpha=0.85)
            ax2.plot(epochs, [r["valid_rouge1"] for r in records],
                     label=label, color=_kind_color(i % 6), alpha=0.85)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("train loss")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("valid ROUGE-1 F1")
        handles, labels = ax1.get_legend_handles_labels()
        if len(labels) <= 8:
            ax2.legend(handles, labels, fontsize=7)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def write_delimited(reports: Dict[FeatureKind, AggregateReport], path,
                    delimiter: str = ",") -> Path:
    """Comparison table as delimited text: one row per model."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(["model", "R-1", "R-2", "R-L", *CATEGORIES])
        for kind, rep in reports.items():
            row = [KIND_LABELS[kind],
                   f"{rep.mean.rouge1.f1 * 100:.4f}",
                   f"{rep.mean.rouge2.f1 * 100:.4f}",
                   f"{rep.mean.rougeL.f1 * 100:.4f}"]
            for cat in CATEGORIES:
                p = mean_precision(rep.per_seed, cat)
                row.append("" if p is None else f"{p * 100:.4f}")
            writer.writerow(row)
    return Path(path)


def load_report_json(path) -> AggregateReport:
    """Rebuild an AggregateReport from its serialized form."""
    from .evaluation import CategoryPrecision, EvalReport, RougeScore

    def parse_one(d: dict) -> EvalReport:
        rep = EvalReport(
            RougeScore(d["rouge1"]["p"], d["rouge1"]["r"], d["rouge1"]["f1"]),
            RougeScore(d["rouge2"]["p"], d["rouge2"]["r"], d["rouge2"]["f1"]),
            RougeScore(d["rougeL"]["p"], d["rougeL"]["r"], d["rougeL"]["f1"]),
            {c: CategoryPrecision(v["generated"], v["matched"])
             for c, v in d["word_precision"].items()},
            seed=d.get("seed"))
        return rep

    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    mean = parse_one(data)
    per_seed = [parse_one(s) for s in data.get("seeds", [])]
    return AggregateReport(mean, per_seed, data.get("std", {}))


def render_report(reports: Dict[FeatureKind, AggregateReport],
                  metrics: Optional[Dict[str, List[dict]]], out_dir) -> List[Path]:
    """Write the CSV plus all figures for one experiment; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [
        write_delimited(reports, out / "comparison.csv"),
        plot_rouge(reports, out / "rouge.png"),
        plot_word_precision(reports, out / "word_precision.png"),
    ]
    if metrics:
        written.append(plot_training_curves(metrics, out / "training_curves.png"))
    return written
