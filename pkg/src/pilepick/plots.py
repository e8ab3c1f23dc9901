"""Benchmark CSV -> per-policy SVG bar charts, plus training-curve plots."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_LABELS = {
    "sum_translations_m": "sum of translations [m]",
    "sum_max_vel_mps": "sum of max velocities [m/s]",
    "diff_mask_pct": "changed cells [%]",
    "diff_volume_l": "changed volume [L]",
}


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_benchmark_csv(csv_path, out_dir) -> list[Path]:
    """One bar chart per metric: mean per policy with a std whisker."""
    rows = read_csv_rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    policies = list(dict.fromkeys(row["policy"] for row in rows))
    written = []
    for metric, label in METRIC_LABELS.items():
        if metric not in rows[0]:
            continue
        means, stds = [], []
        for policy in policies:
            vals = np.array([float(r[metric]) for r in rows
                             if r["policy"] == policy])
            means.append(vals.mean())
            stds.append(vals.std())
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(policies), 3.2))
        x = np.arange(len(policies))
        ax.bar(x, means, yerr=stds, capsize=3, color="#4878a8")
        ax.set_xticks(x)
        ax.set_xticklabels(policies, rotation=15, ha="right")
        ax.set_ylabel(label)
        n_seeds = len({r["seed"] for r in rows})
        ax.set_title(f"{n_seeds} piles, noise={rows[0]['noise']}")
        fig.tight_layout()
        path = out_dir / f"{metric}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_training_csv(csv_path, out_dir) -> list[Path]:
    """Loss and episode-penalty curves from a training log."""
    rows = read_csv_rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path}: no data rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for column, label in (("loss_mean", "L1 loss (window mean)"),
                          ("penalty_mean", "episode penalty [m]")):
        pts = [(int(r["update"]), float(r[column]))
               for r in rows if r.get(column)]
        if not pts:
            continue
        updates, values = zip(*pts)
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        ax.plot(updates, values, lw=1.2, color="#b05030")
        ax.set_xlabel("learner updates")
        ax.set_ylabel(label)
        fig.tight_layout()
        path = out_dir / f"{column}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def render_csv(csv_path, out_dir) -> list[Path]:
    """Dispatch on the header: benchmark CSV or training log."""
    with open(csv_path, newline="") as fh:
        header = fh.readline().strip().split(",")
    if "policy" in header:
        return render_benchmark_csv(csv_path, out_dir)
    if "loss_mean" in header:
        return render_training_csv(csv_path, out_dir)
    raise ValueError(f"{csv_path}: unrecognized CSV header {header}")
