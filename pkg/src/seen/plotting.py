"""Figures written next to CLI outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SHORT_NAMES = ("Ha", "Sa", "An", "Di", "Su", "Fe", "Ne")


def plot_confusion(counts: np.ndarray, path, title: str = "") -> Path:
    counts = np.asarray(counts)
    support = counts.sum(axis=1, keepdims=True)
    rates = np.divide(counts, support, out=np.zeros(counts.shape), where=support > 0)
    fig, ax = plt.subplots(figsize=(5, 4.4))
    im = ax.imshow(rates, vmin=0, vmax=1, cmap="Blues")
    n = counts.shape[0]
    ax.set_xticks(range(n), SHORT_NAMES[:n])
    ax.set_yticks(range(n), SHORT_NAMES[:n])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            if counts[i, j]:
                ax.text(j, i, str(counts[i, j]), ha="center", va="center", fontsize=7,
                        color="white" if rates[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_training_curves(history: Sequence, path) -> Path:
    epochs = [h.epoch for h in history]
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    a.plot(epochs, [h.train_loss for h in history])
    a.set_xlabel("epoch")
    a.set_ylabel("train loss")
    b.plot(epochs, [h.train_acc for h in history], label="train acc")
    val = [(h.epoch, h.val_war) for h in history if h.val_war is not None]
    if val:
        b.plot(*zip(*val), marker="o", label="val WAR")
    b.set_ylim(0, 1)
    b.set_xlabel("epoch")
    b.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
