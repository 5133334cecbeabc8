"""Matplotlib renderings of training curves, sweep tables and map dumps.

Figures are written next to the delimited reports; every renderer is a
pure file producer so the harness stays scriptable.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_loss_curve(curve, path) -> None:
    """curve: iterable of (epoch, mean_loss)."""
    epochs = [e for e, _ in curve]
    losses = [v for _, v in curve]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, losses, marker="o", lw=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean train loss")
    ax.set_title("error-approximation loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_chart(rows, axis: str, path) -> None:
    """rows: dicts with the sweep value plus zncc_fused / zncc_raw."""
    labels = [str(r["value"]) for r in rows]
    fused = [r["zncc_fused"] for r in rows]
    raw = [r["zncc_raw"] for r in rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.bar(x - 0.18, fused, width=0.36, label="fused")
    ax.bar(x + 0.18, raw, width=0.36, label="raw input")
    ax.set_xticks(x, labels)
    ax.set_xlabel(axis)
    ax.set_ylabel("mean test ZNCC")
    ax.set_title(f"{axis} sweep")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_map_panel(named_maps, path, ncols: int = 4) -> None:
    """Grid of grayscale maps (dict name -> [H, W] array)."""
    names = list(named_maps)
    n = len(names)
    ncols = min(ncols, max(1, n))
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.4 * ncols, 2.6 * nrows),
                             squeeze=False)
    for i, name in enumerate(names):
        ax = axes[i // ncols][i % ncols]
        arr = np.asarray(named_maps[name])
        if arr.ndim == 3 and arr.shape[0] == 3:  # rgb image
            ax.imshow(np.clip(arr.transpose(1, 2, 0), 0, 1))
        else:
            ax.imshow(arr.reshape(arr.shape[-2:]), cmap="magma")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    for j in range(n, nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
