"""Static report figures written next to the tab-separated outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def plot_loss_curves(epochs, train_loss, val_loss, path: str | Path) -> Path:
    """Training and validation loss per epoch on a log axis."""
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    ax.plot(epochs, train_loss, marker="o", ms=3, label="train")
    ax.plot(epochs, val_loss, marker="s", ms=3, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("heatmap MSE (summed over stacks)")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_cost_comparison(reports, path: str | Path) -> Path:
    """Side-by-side parameter and MAC totals for several cost reports."""
    names = [r.name for r in reports]
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.2), dpi=100)
    for ax, values, label in ((axes[0], [r.total_params / 1e6 for r in reports], "parameters (M)"),
                              (axes[1], [r.total_flops / 1e9 for r in reports], "MACs (G)")):
        bars = ax.bar(names, values, color=["tab:blue", "tab:gray", "tab:orange"][:len(names)])
        ax.bar_label(bars, fmt="%.2f")
        ax.set_ylabel(label)
        ax.tick_params(axis="x", labelrotation=15)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
