"""Figure rendering for run reports (written to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(path, curves: dict[str, list[float]], title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, values in curves.items():
        if values:
            ax.plot(np.arange(1, len(values) + 1), values, label=label, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_metric_bars(path, kinds, psnrs, ssims) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    x = np.arange(len(kinds))
    for ax, values, label in zip(axes, (psnrs, ssims), ("PSNR (dB)", "SSIM")):
        ax.bar(x, values, color="#4878a8")
        ax.set_xticks(x)
        ax.set_xticklabels(kinds, rotation=20, ha="right")
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_cka_heatmap(path, kinds, matrix: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(kinds)))
    ax.set_yticks(range(len(kinds)))
    ax.set_xticklabels(kinds, rotation=30, ha="right")
    ax.set_yticklabels(kinds)
    for i in range(len(kinds)):
        for j in range(len(kinds)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center",
                    color="white" if matrix[i, j] < 0.6 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.85)
    ax.set_title("latent CKA by degradation kind")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_layer_scores(path, names, scores, selected) -> None:
    fig, ax = plt.subplots(figsize=(7, 0.28 * len(names) + 1.2))
    y = np.arange(len(names))
    colors = ["#c44e52" if s else "#777777" for s in selected]
    ax.barh(y, scores, color=colors)
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("layer conductance score")
    ax.set_title("selected layers highlighted")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_sample_grid(path, rows: dict[str, np.ndarray]) -> None:
    """Rows of images, one labelled row per entry of (n,3,H,W) arrays."""
    n_rows = len(rows)
    n_cols = max(len(images) for images in rows.values())
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.4 * n_cols, 1.5 * n_rows),
                             squeeze=False)
    for r, (label, images) in enumerate(rows.items()):
        for c in range(n_cols):
            ax = axes[r][c]
            ax.axis("off")
            if c < len(images):
                ax.imshow(np.clip(images[c].transpose(1, 2, 0), 0, 1))
            if c == 0:
                ax.set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
