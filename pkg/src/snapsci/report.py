"""Render training logs and metric reports into figures and CSV tables.

The pipeline itself emits line-delimited JSON only; this module is the
post-processing path that turns those logs into matplotlib figures written
to files, alongside a delimited copy of the parsed rows.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import DataError


def _read_jsonl(path) -> List[dict]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as err:
            raise DataError(f"{path}:{lineno}: bad JSON log line: {err}") from None
    if not rows:
        raise DataError(f"empty training log {path}")
    return rows


def render_training_report(log_path, out_dir) -> List[str]:
    """Write loss curves, the rate-schedule plot, an APC histogram, and a CSV."""
    rows = _read_jsonl(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[str] = []

    csv_path = out / "train_log.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "step", "task_loss", "rate", "J", "lambda_effective", "apc_mean"]
        )
        for r in rows:
            writer.writerow(
                [r["epoch"], r["step"], r["task_loss"], r["rate"], r["J"],
                 r["lambda_effective"], float(np.mean(r["apc"]))]
            )
    written.append(str(csv_path))

    steps = [r["step"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].semilogy(steps, [r["task_loss"] for r in rows], label="task loss")
    axes[0].semilogy(steps, [r["J"] for r in rows], label="objective", alpha=0.7)
    axes[0].set_xlabel("step")
    axes[0].legend(frameon=False)
    axes[1].plot(steps, [r["rate"] for r in rows], color="tab:red")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("parameter rate")
    fig.tight_layout()
    loss_path = out / "loss_curves.png"
    fig.savefig(loss_path, dpi=120)
    plt.close(fig)
    written.append(str(loss_path))

    epochs, lambdas = [], []
    for r in rows:
        if not epochs or r["epoch"] != epochs[-1]:
            epochs.append(r["epoch"])
            lambdas.append(r["lambda_effective"])
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.step(epochs, lambdas, where="mid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("effective rate weight")
    fig.tight_layout()
    sched_path = out / "rate_schedule.png"
    fig.savefig(sched_path, dpi=120)
    plt.close(fig)
    written.append(str(sched_path))

    apcs = np.concatenate([np.atleast_1d(r["apc"]) for r in rows])
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.hist(apcs, bins=30, color="tab:gray")
    ax.set_xlabel("sampled photon count target")
    ax.set_ylabel("draws")
    fig.tight_layout()
    apc_path = out / "apc_hist.png"
    fig.savefig(apc_path, dpi=120)
    plt.close(fig)
    written.append(str(apc_path))

    return written


def render_metrics_report(report_paths, out_dir) -> List[str]:
    """Tabulate metric reports into a CSV and a grouped bar figure per task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for path in report_paths:
        reports.append((Path(path).stem, json.loads(Path(path).read_text())))
    written: List[str] = []

    csv_path = out / "metrics.csv"
    skip = {"provenance", "thresholds"}
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "task", "metric", "value"])
        for name, rep in reports:
            for key, value in rep.items():
                if key in skip or key == "task" or not isinstance(value, (int, float)):
                    continue
                writer.writerow([name, rep.get("task", ""), key, value])
    written.append(str(csv_path))

    by_task: dict = {}
    for name, rep in reports:
        by_task.setdefault(rep.get("task", "unknown"), []).append((name, rep))
    for task, items in by_task.items():
        keys = [k for k, v in items[0][1].items()
                if isinstance(v, (int, float)) and k not in skip and k != "task"]
        fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(keys), 3.2))
        width = 0.8 / len(items)
        xs = np.arange(len(keys))
        for i, (name, rep) in enumerate(items):
            ax.bar(xs + i * width, [rep[k] for k in keys], width, label=name)
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(keys, rotation=20, ha="right")
        ax.legend(frameon=False, fontsize=8)
        ax.set_title(f"{task} metrics")
        fig.tight_layout()
        path = out / f"metrics_{task}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))
    return written
