"""Report figures: metric curves over t and mid-slice montages."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRIC_LABELS = {"psnr_db": "PSNR (dB)", "ncc": "NCC", "ssim": "SSIM", "nmse": "NMSE"}


def plot_metrics(report, path, title=None):
    """One panel per metric against t; returns the saved path."""
    ts = [r.t for r in report.rows]
    fig, axes = plt.subplots(1, len(METRIC_LABELS), figsize=(3.2 * len(METRIC_LABELS), 3.0))
    for ax, (key, label) in zip(axes, METRIC_LABELS.items()):
        ax.plot(ts, [getattr(r, key) for r in report.rows], marker="o", lw=1.5)
        ax.set_xlabel("t")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _mid_slice(vol, axis):
    data = np.asarray(vol.data if hasattr(vol, "data") else vol)
    if data.ndim == 4:
        data = data[0]
    return np.take(data, data.shape[axis] // 2, axis=axis)


def plot_montage(frames, ts, path, axis=0):
    """Central slice of each frame in a single row, titled by time."""
    n = len(frames)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False)
    for ax, vol, t in zip(axes[0], frames, ts):
        ax.imshow(_mid_slice(vol, axis), cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(f"t={t:g}", fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
