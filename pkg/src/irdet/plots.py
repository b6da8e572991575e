"""Figure rendering for reports. Every function writes a PNG and returns the
path; nothing is shown interactively."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle

DPI = 120


def save_landscape_png(path, grid, dxs, dys, title):
    """Heatmap of a metric over center offsets (dx across, dy down)."""
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    im = ax.imshow(
        grid,
        origin="lower",
        extent=(dxs[0], dxs[-1], dys[0], dys[-1]),
        aspect="auto",
        cmap="viridis",
        vmin=0.0,
    )
    fig.colorbar(im, ax=ax, label="similarity")
    ax.set_xlabel("center offset x (px)")
    ax.set_ylabel("center offset y (px)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_history_png(path, history):
    """Loss and validation-metric curves from training history entries."""
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    for key in ("loss_total", "loss_box", "loss_obj", "loss_cls"):
        ax1.plot(epochs, [h[key] for h in history], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.set_title("training loss")
    for key in ("precision", "recall", "f1", "ap50"):
        ax2.plot(epochs, [h[key] for h in history], label=key)
    ax2.set_xlabel("epoch")
    ax2.set_ylim(-0.02, 1.02)
    ax2.legend(fontsize=8)
    ax2.set_title("validation")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_pr_curve_png(path, curve, ap):
    """Precision-recall step plot; curve rows are (recall, precision)."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    if curve:
        r = [pt[0] for pt in curve]
        p = [pt[1] for pt in curve]
        ax.step([0.0] + r, [p[0]] + p, where="post")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.set_title(f"AP@50 = {ap:.4f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_preview_png(path, samples, cols=4):
    """Grid of scenes with ground-truth boxes outlined."""
    n = len(samples)
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for ax, s in zip(axes.flat, samples):
        ax.imshow(s.image[0], cmap="gray", vmin=0.0, vmax=1.0)
        for box, _ in s.boxes:
            x0, y0, x1, y1 = box.corners()
            ax.add_patch(
                Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor="red", linewidth=0.8)
            )
        ax.set_title(s.image_id, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def save_flops_png(path, rows, top=20):
    """Horizontal bars of the costliest records; rows from count_flops."""
    ranked = sorted(rows, key=lambda r: r[2], reverse=True)[:top]
    names = [r[0] for r in ranked][::-1]
    vals = np.array([r[2] for r in ranked][::-1], dtype=float) / 1e9
    fig, ax = plt.subplots(figsize=(7.0, 0.32 * len(names) + 1.2))
    ax.barh(range(len(names)), vals)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlabel("GFLOPs")
    ax.set_title("per-record forward cost")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
