"""Report figures written straight to files (Agg backend, no display)."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["savefig.bbox"] = "tight"
plt.rcParams["savefig.dpi"] = 120
plt.rcParams["font.size"] = 9


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_log(rows, path):
    """Loss components and learning rate against epoch, UF1 on a second panel."""
    ep = [r["epoch"] for r in rows]
    fig, (ax_loss, ax_uf1) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for key, style in (("loss_total", "k-"), ("loss_coarse", "C0--"), ("loss_fine", "C1:")):
        vals = [r[key] for r in rows]
        if any(math.isfinite(v) for v in vals):
            ax_loss.plot(ep, vals, style, label=key.replace("loss_", ""))
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", frameon=False)
    ax_lr = ax_loss.twinx()
    ax_lr.plot(ep, [r["lr"] for r in rows], color="0.6", lw=0.8)
    ax_lr.set_ylabel("lr", color="0.5")
    for key, style in (("train_uf1", "C2-"), ("val_uf1", "C3-")):
        vals = [r[key] for r in rows]
        if any(math.isfinite(v) for v in vals):
            ax_uf1.plot(ep, vals, style, label=key.replace("_uf1", ""))
    ax_uf1.set_ylim(0, 1.02)
    ax_uf1.set_xlabel("epoch")
    ax_uf1.set_ylabel("UF1")
    ax_uf1.legend(loc="lower right", frameon=False)
    return _save(fig, path)


def plot_confusion(report, path, title=None):
    cm = report.confusion
    names = list(report.labels) or [str(i) for i in range(len(cm))]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(cm), 0.8 + 0.6 * len(cm)))
    ax.imshow(cm, cmap="Blues")
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > cm.max() / 2 else "black")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("truth")
    ax.set_title(title or f"UF1 {report.uf1:.3f}  UAR {report.uar:.3f}  ACC {report.acc:.3f}")
    return _save(fig, path)


def plot_saliency(magnitude, cam, path, title=None):
    """Flow magnitude with the (already upsampled) activation map on top."""
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.imshow(magnitude, cmap="gray")
    ax.imshow(cam, cmap="jet", alpha=0.45, vmin=0, vmax=1)
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_scan_grid(perm, path, title=None):
    """Visit step in every cell, with the path drawn through the cell centres."""
    from .scan import step_grid

    grid = step_grid(perm)
    rows, cols = np.divmod(perm.array, perm.width)
    fig, ax = plt.subplots(figsize=(0.45 * perm.width + 1, 0.45 * perm.height + 1))
    ax.imshow(grid, cmap="viridis", alpha=0.35)
    ax.plot(cols, rows, "k-", lw=0.8)
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title or "")
    return _save(fig, path)
