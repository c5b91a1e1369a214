"""Figures written next to the CSV/JSONL outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_history(history: Sequence[dict], path) -> Path:
    epochs = [h["epoch"] for h in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("L", "L_cls", "L_cl", "L_sl"):
        ax_loss.plot(epochs, [h[key] for h in history], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean batch loss")
    ax_loss.legend(frameon=False)
    for key in ("train_acc", "eval_acc"):
        vals = [h.get(key) for h in history]
        if all(v is not None for v in vals):
            ax_acc.plot(epochs, vals, label=key)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.legend(frameon=False)
    return _save(fig, path)


def plot_salience(salience: Sequence[dict], path, highlight: Sequence[str] = ()) -> Path:
    """Bar per region, in ranked order; ``highlight`` names are drawn in a second colour."""
    names = [s["region"] for s in salience]
    colors = ["tab:red" if n in highlight else "tab:blue" for n in names]
    fig, ax = plt.subplots(figsize=(max(4, 0.4 * len(names)), 3.5))
    ax.bar(range(len(names)), [s["score"] for s in salience], color=colors)
    ax.set_xticks(range(len(names)), names, rotation=90)
    ax.set_ylabel("brain-to-text salience")
    return _save(fig, path)


def plot_token_influence(influence: Sequence[dict], path, k: int = 15) -> Path:
    """MCI vs NC mean salience for the k most influential tokens."""
    rows = list(influence)[:k]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(rows)), 3.5))
    ax.bar(x - 0.2, [r["score_mci"] for r in rows], width=0.4, label="MCI")
    ax.bar(x + 0.2, [r["score_nc"] for r in rows], width=0.4, label="NC")
    ax.set_xticks(x, [r["token"] for r in rows], rotation=90)
    ax.set_ylabel("text-to-brain salience")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    labels = [f"{r['group']}: {r['variant']}" for r in rows]
    metrics = ("acc", "sen", "spe", "f1")
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(rows)), 3.5))
    for i, m in enumerate(metrics):
        ax.bar(x + (i - 1.5) * width, [100 * r[m] for r in rows], width=width, label=m.upper())
    ax.set_xticks(x, labels, rotation=30, ha="right")
    ax.set_ylabel("%")
    ax.set_ylim(0, 105)
    ax.legend(frameon=False, ncol=4)
    return _save(fig, path)
