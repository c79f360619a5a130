"""Figures written next to the delimited run outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def plot_training(history: list[dict], path, best_epoch: int | None = None) -> Path:
    """Train loss and validation balanced accuracy per epoch."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7.0, 2.8))
    ax_loss.plot(epochs, [r["train_loss"] for r in history], marker="o", ms=3, color="C0")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.plot(epochs, [r["val_balanced_accuracy"] for r in history], marker="o", ms=3, color="C1")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("val balanced accuracy")
    ax_acc.set_ylim(0.0, 1.02)
    if best_epoch is not None:
        ax_acc.axvline(best_epoch, color="0.5", ls="--", lw=0.8, label=f"best (epoch {best_epoch})")
        ax_acc.legend(loc="lower right", frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_gradcheck(groups: dict[str, float], path, tolerance: float = 1e-6) -> Path:
    names = sorted(groups)
    vals = [max(groups[n], 1e-18) for n in names]
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    ax.barh(names, vals, color=["C3" if v >= tolerance else "C2" for v in vals])
    ax.axvline(tolerance, color="0.3", ls="--", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("max relative error")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
