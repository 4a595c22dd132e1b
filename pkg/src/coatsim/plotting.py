"""Matplotlib figures written next to the CSV/text outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import srgb_encode  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "coatsim",
}


def _save(fig, path):
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_report(report, path):
    """Grouped bars: one group per channel, one bar per method."""
    from .evaluate import REPORT_CHANNELS

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.0))
        n = len(report.rows)
        width = 0.8 / max(n, 1)
        x = np.arange(len(REPORT_CHANNELS))
        for k, (name, means) in enumerate(report.rows):
            vals = [means.get(c, np.nan) for c in REPORT_CHANNELS]
            ax.bar(x + (k - (n - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(REPORT_CHANNELS)
        ax.set_ylabel("PSNR (dB)")
        ax.legend(frameon=False, ncol=min(n, 5))
        _save(fig, path)


def plot_loss_curve(losses, path, window=25):
    from .toyflow import smoothed

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        if len(losses):
            ax.plot(np.arange(len(losses)), losses, lw=0.6, alpha=0.4, label="loss")
            s = smoothed(losses, window)
            ax.plot(np.arange(len(s)) + (len(losses) - len(s)), s, lw=1.4, label=f"mean of {window}")
            ax.legend(frameon=False)
        ax.set_xlabel("step")
        ax.set_ylabel("flow-matching loss")
        _save(fig, path)


def plot_channel_stack(stack, path, title=None):
    """Image, albedo, shading, residual, normals and depth panels of one render."""
    panels = [("image", srgb_encode(stack.image)), ("albedo", srgb_encode(stack.albedo)),
              ("shading", srgb_encode(stack.shading)), ("residual", np.clip(stack.residual * 4, 0, 1)),
              ("normals", 0.5 * (stack.normals + 1.0) * (stack.object_mask[..., None] > 0)),
              ("depth", np.where(np.isfinite(stack.depth), stack.depth, np.nan))]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.0 * len(panels), 2.2))
        for ax, (name, img) in zip(axes, panels):
            ax.imshow(img, cmap="viridis" if img.ndim == 2 else None, interpolation="nearest")
            ax.set_title(name)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        _save(fig, path)
