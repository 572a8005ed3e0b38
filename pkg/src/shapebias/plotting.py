"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

_LOG_X = {"saturation"}


def _numeric(param: str) -> float | None:
    try:
        return float(param)
    except ValueError:
        return None


def plot_transform_curves(report: EvalReport, path, metric: str = "acc_on_correct") -> list[str]:
    """One panel per transform, one line per model; returns the transforms drawn."""
    transforms = sorted({r.transform for r in report.rows if _numeric(r.param) is not None})
    if not transforms:
        return []
    cols = min(3, len(transforms))
    rows = math.ceil(len(transforms) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 3.4 * rows), squeeze=False)
    models = sorted({r.model for r in report.rows})
    for ax, transform in zip(axes.flat, transforms):
        for model in models:
            pts = sorted(
                (_numeric(r.param), getattr(r, metric))
                for r in report.rows
                if r.model == model and r.transform == transform and _numeric(r.param) is not None
            )
            pts = [(x, y) for x, y in pts if y is not None and math.isfinite(x)]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, [100 * y for y in ys], marker="o", ms=3, label=model)
        if transform in _LOG_X:
            ax.set_xscale("log", base=2)
        ax.set_title(transform)
        ax.set_xlabel("level")
        ax.set_ylabel(f"{metric} (%)")
        ax.set_ylim(0, 100)
        ax.grid(alpha=0.3)
    for ax in list(axes.flat)[len(transforms):]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return transforms


def plot_training_log(records: list[dict], path, title: str = "") -> None:
    epochs = [r["epoch"] for r in records]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(epochs, [r["loss"] for r in records], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax2.plot(epochs, [r["train_acc"] for r in records], marker="o", ms=3, label="train")
    val = [(r["epoch"], r["val_acc"]) for r in records if r["val_acc"] is not None]
    if val:
        ax2.plot(*zip(*val), marker="s", ms=3, label="validation")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1)
    ax2.legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_robustness(rows: list[tuple[str, float, float]], path) -> None:
    """Grouped bars of (model, clean accuracy, robust accuracy)."""
    names = [r[0] for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(rows) + 2), 3.4))
    ax.bar([x - 0.2 for x in xs], [100 * r[1] for r in rows], width=0.4, label="clean")
    ax.bar([x + 0.2 for x in xs], [100 * r[2] for r in rows], width=0.4, label="PGD-40")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=120)
    plt.close(fig)
