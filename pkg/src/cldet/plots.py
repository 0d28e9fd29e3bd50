"""Static figures for experiment reports (per-task mAP curves, ablation bars)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def plot_task_curves(
    rows: list[dict], out_path: str | Path, metric_label: str = "mAP@0.5"
) -> Path:
    """Per-task 'all' mAP curve, one line per method.

    rows: dicts with keys method, seed, task, all (floats/ints). Seeds are
    averaged per (method, task).
    """
    acc: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        acc[r["method"]][int(r["task"])].append(float(r["all"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in sorted(acc):
        tasks = sorted(acc[method])
        means = [sum(acc[method][t]) / len(acc[method][t]) * 100 for t in tasks]
        ax.plot([t + 1 for t in tasks], means, marker="o", label=method)
    ax.set_xlabel("task")
    ax.set_ylabel(f"{metric_label} (all classes)")
    ax.set_title("Per-task performance")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_old_new_bars(rows: list[dict], out_path: str | Path) -> Path:
    """Final-task old/new/all comparison across methods."""
    final_task = max(int(r["task"]) for r in rows)
    acc: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if int(r["task"]) == final_task:
            for key in ("old", "new", "all"):
                acc[r["method"]][key].append(float(r[key]))
    methods = sorted(acc)
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.25
    for i, key in enumerate(("old", "new", "all")):
        vals = [sum(acc[m][key]) / len(acc[m][key]) * 100 for m in methods]
        ax.bar([x + (i - 1) * width for x in range(len(methods))], vals, width, label=key)
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels(methods, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mAP x 100")
    ax.set_title(f"Final performance after task {final_task + 1}")
    ax.legend()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
