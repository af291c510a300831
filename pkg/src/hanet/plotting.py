"""Optional PNG renderings of the CSV outputs (label tracks, sweeps, training curves).

Uses the non-interactive Agg backend; every function writes one file.
"""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import BoundaryNorm, ListedColormap  # noqa: E402


def _class_cmap(C: int):
    colors = plt.get_cmap("tab10" if C <= 10 else "tab20")(np.arange(C) % (10 if C <= 10 else 20))
    return ListedColormap(colors), BoundaryNorm(np.arange(C + 1) - 0.5, C)


def plot_label_tracks(gt: Sequence[int] | None, pred: Sequence[int], C: int, path,
                      title: str = "") -> None:
    """Colour-band comparison of ground-truth and predicted frame labels."""
    rows = [("pred", np.asarray(pred))]
    if gt is not None:
        rows.insert(0, ("gt", np.asarray(gt)))
    cmap, norm = _class_cmap(C)
    fig, axes = plt.subplots(len(rows), 1, figsize=(10, 0.6 + 0.5 * len(rows)), squeeze=False)
    for ax, (name, labels) in zip(axes[:, 0], rows):
        ax.imshow(labels[None, :], aspect="auto", cmap=cmap, norm=norm, interpolation="nearest")
        ax.set_yticks([0], [name])
        ax.set_xticks([])
    axes[-1, 0].set_xlabel("frame")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep(rows: Sequence[dict], path, metric: str = "val_accuracy") -> None:
    """One panel per swept hyperparameter, ``metric`` against its value."""
    names = list(dict.fromkeys(r["swept"] for r in rows))
    fig, axes = plt.subplots(1, len(names), figsize=(3.5 * len(names), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        sel = [r for r in rows if r["swept"] == name]
        ax.plot([r[name] for r in sel], [r[metric] for r in sel], marker="o")
        ax.set_xlabel(name)
        ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_history(records: Sequence[dict], path) -> None:
    """Training loss and validation accuracy per epoch."""
    epochs = [r["epoch"] for r in records]
    fig, left = plt.subplots(figsize=(6, 3.5))
    left.plot(epochs, [r["train_loss"] for r in records], color="tab:blue")
    left.set_xlabel("epoch")
    left.set_ylabel("train loss", color="tab:blue")
    right = left.twinx()
    right.plot(epochs, [r["val_accuracy"] for r in records], color="tab:orange")
    right.set_ylabel("val accuracy (%)", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
