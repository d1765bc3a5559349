"""Report figures.  Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_confusion(cm, path, title: str = "") -> Path:
    cm = np.asarray(cm)
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    ax.imshow(cm, cmap="Blues")
    hi = cm.max() if cm.size else 0
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(int(v)), ha="center", va="center", color="white" if v > hi / 2 else "black", fontsize=9)
    ax.set_xticks(range(len(CLASS_NAMES)), CLASS_NAMES, rotation=30, ha="right", fontsize=8)
    ax.set_yticks(range(len(CLASS_NAMES)), CLASS_NAMES, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def plot_history(history, path, title: str = "") -> Path:
    """Loss and accuracy per epoch for train and test."""
    h = np.array([tuple(r) for r in history], dtype=np.float64)
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(7, 2.8))
    ax_l.plot(h[:, 0], h[:, 1], label="train")
    ax_l.plot(h[:, 0], h[:, 3], label="test")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("weighted CE")
    ax_l.legend(frameon=False, fontsize=8)
    ax_a.plot(h[:, 0], h[:, 2], label="train")
    ax_a.plot(h[:, 0], h[:, 4], label="test")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(0, 1.02)
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def plot_gan_losses(history, path, stabilization_epochs: int | None = None) -> Path:
    h = np.array([tuple(r) for r in history], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 2.8))
    ax.plot(h[:, 0], h[:, 1], label="generator")
    ax.plot(h[:, 0], h[:, 2], label="discriminator")
    if stabilization_epochs:
        ax.axvline(stabilization_epochs + 0.5, color="0.6", lw=0.8, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_xai_panel(image, overlays, titles, path) -> Path:
    """The input next to one overlay per probe."""
    n = len(overlays) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
    axes[0].imshow(np.asarray(image), cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input", fontsize=8)
    for ax, ov, t in zip(axes[1:], overlays, titles):
        ax.imshow(np.clip(ov, 0, 1))
        ax.set_title(t, fontsize=8)
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)


def save_rgb(rgb, path) -> Path:
    """Write an ``(H, W, 3)`` unit-range array as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.clip(np.asarray(rgb, dtype=np.float64), 0, 1))
    return path
