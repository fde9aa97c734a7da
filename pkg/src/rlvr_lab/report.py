"""Metrics files, run summaries and figures.

CSV and JSON writers have no plotting dependency; matplotlib is imported
only inside the figure functions.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .trainer import METRIC_FIELDS, MetricsRecord

CSV_SCHEMA_VERSION = 1
ENTROPY_TAIL = 50


def metrics_filename(name: str, seed: int) -> str:
    return f"metrics_{name}_seed{seed}.csv"


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for rec in records:
        writer.writerow(rec.row())
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def read_metrics_csv(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [
            MetricsRecord(step=int(row["step"]), **{k: float(row[k]) for k in METRIC_FIELDS[1:]})
            for row in reader
        ]


def steps_to_target(records: list[MetricsRecord], target: float) -> int | None:
    """First step whose validation accuracy reaches ``target`` (None if never)."""
    for rec in records:
        if rec.val_acc >= target:
            return rec.step
    return None


def run_summary(records: list[MetricsRecord], target: float) -> dict:
    val = [r.val_acc for r in records]
    ent = [r.mean_entropy for r in records]
    return {
        "steps": len(records),
        "final_val_acc": val[-1],
        "best_val_acc": max(val),
        "final_train_acc": records[-1].train_acc,
        "initial_entropy": ent[0],
        "final_entropy": ent[-1],
        "tail_mean_entropy": float(np.mean(ent[-ENTROPY_TAIL:])),
        "steps_to_target": steps_to_target(records, target),
    }


def aggregate(summaries: dict[int, dict]) -> dict:
    """Across-seed means; steps-to-target averages only seeds that reached it."""
    seeds = sorted(summaries)
    out = {"seeds": seeds}
    for key in ("final_val_acc", "best_val_acc", "final_entropy", "tail_mean_entropy"):
        out[f"mean_{key}"] = float(np.mean([summaries[s][key] for s in seeds]))
    reached = [summaries[s]["steps_to_target"] for s in seeds if summaries[s]["steps_to_target"] is not None]
    out["reached_target"] = len(reached)
    out["mean_steps_to_target"] = float(np.mean(reached)) if reached else None
    return out


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({
        "axes.spines.right": False,
        "axes.spines.top": False,
        "font.size": 9,
        "legend.fontsize": 8,
        "legend.frameon": False,
        "figure.dpi": 120,
    })
    return plt


CURVES = (
    ("train_acc", "Training accuracy"),
    ("val_acc", "Validation accuracy"),
    ("mean_entropy", "Mean token entropy (nats)"),
)


def plot_curves(runs: dict[str, dict[int, list[MetricsRecord]]], out_dir, smooth: int = 5) -> list[Path]:
    """One figure per metric: mean over seeds per run name, min-max band shaded."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for field, label in CURVES:
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for name, by_seed in runs.items():
            series = np.array([[getattr(r, field) for r in recs] for recs in by_seed.values()])
            if smooth > 1 and series.shape[1] >= smooth:
                kernel = np.ones(smooth) / smooth
                series = np.array([np.convolve(s, kernel, mode="valid") for s in series])
            steps = np.arange(series.shape[1]) + (smooth - 1 if smooth > 1 else 0)
            ax.plot(steps, series.mean(0), label=name, lw=1.3)
            if series.shape[0] > 1:
                ax.fill_between(steps, series.min(0), series.max(0), alpha=0.15)
        ax.set_xlabel("Step")
        ax.set_ylabel(label)
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"{field}.png"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths


def plot_sweep(table: list[dict], out_dir, axes: list[str]) -> Path:
    plt = _pyplot()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [", ".join(f"{a}={row[a]}" for a in axes) for row in table]
    values = [row["mean_final_val_acc"] for row in table]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(table) + 2), 3.0))
    ax.bar(range(len(values)), values, color="0.35")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("Final validation accuracy")
    fig.tight_layout()
    path = out_dir / "sweep_val_acc.png"
    fig.savefig(path)
    plt.close(fig)
    return path


def format_table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return "nan" if math.isnan(v) else f"{v:.4f}"
        return "-" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)
