"""Report figures written next to the CSV outputs of each CLI stage."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mining import PALETTE  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 120,
    "figure.dpi": 120,
}

# no creation timestamps so re-rendering gives identical files
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight", metadata=_META)
    plt.close(fig)


def plot_loss(history, path, title="reconstruction loss"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.plot(np.arange(1, len(history) + 1), history, lw=1.2, color="#1f4e79")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        ax.set_title(title)
        if len(history) > 1 and min(history) > 0:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
        _save(fig, path)


def plot_confusion(cm, path):
    counts = np.asarray(cm.counts)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 0.8 * len(cm.classes), 1.0 + 0.8 * len(cm.classes)))
        ax.imshow(counts, cmap="Blues")
        for (i, j), v in np.ndenumerate(counts):
            color = "white" if v > counts.max() / 2 else "black"
            ax.text(j, i, str(v), ha="center", va="center", color=color)
        ax.set_xticks(range(len(cm.classes)), cm.classes, rotation=30)
        ax.set_yticks(range(len(cm.classes)), cm.classes)
        ax.set_xlabel("prediction")
        ax.set_ylabel("truth")
        ax.set_title(f"accuracy {cm.accuracy:.3f}")
        _save(fig, path)


def plot_spectrogram(frames, path, sample_rate=None, hop_seconds=None, title=""):
    frames = np.asarray(frames)
    extent = None
    if sample_rate and hop_seconds:
        extent = [0, frames.shape[0] * hop_seconds, 0, sample_rate / 2000.0]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.imshow(np.log1p(frames.T), origin="lower", aspect="auto", cmap="magma", extent=extent)
        ax.set_xlabel("time (s)" if extent else "frame")
        ax.set_ylabel("frequency (kHz)" if extent else "bin")
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_reconstructions(windows, reconstructions, path, limit=4):
    n = min(limit, len(windows))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(2, n, figsize=(2.2 * n, 4), squeeze=False)
        for k in range(n):
            for row, data, label in ((0, windows[k], "input"), (1, reconstructions[k], "reconstruction")):
                ax = axes[row, k]
                ax.imshow(np.asarray(data).T, origin="lower", aspect="auto", cmap="magma")
                ax.set_xticks([])
                ax.set_yticks([])
                if k == 0:
                    ax.set_ylabel(label)
        _save(fig, path)


def plot_kernel_grid(img, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 5 * img.shape[0] / max(img.shape[1], 1)))
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_axis_off()
        _save(fig, path)


def plot_layout(coords, assignments, path, indices=None, title="t-SNE map"):
    coords = np.asarray(coords)
    assignments = np.asarray(assignments)
    idx = np.arange(len(coords)) if indices is None else np.asarray(indices)
    colors = [PALETTE[int(c) % len(PALETTE)] for c in assignments[idx]]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(coords[idx, 0], coords[idx, 1], c=colors, s=6, linewidths=0)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title)
        _save(fig, path)
