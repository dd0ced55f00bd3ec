"""Heatmaps and training curves rendered to image files (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _symmetric_limit(*mats) -> float:
    m = max(float(np.max(np.abs(a))) for a in mats)
    return m if m > 0 else 1.0


def plot_stage_means(means: dict, path, title: str = "group-mean MC") -> Path:
    """One heatmap per stage, on a shared colour scale."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(means), figsize=(3.2 * len(means), 3.0), squeeze=False)
        vmax = _symmetric_limit(*means.values())
        for ax, (label, m) in zip(axes[0], means.items()):
            im = ax.imshow(m, cmap="viridis", vmin=min(0.0, float(np.min(m))), vmax=vmax)
            ax.set_title(str(label))
            ax.set_xlabel("ROI")
            ax.set_ylabel("ROI")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        fig.suptitle(title)
        return _save(fig, path)


def plot_delta_thresholds(delta: np.ndarray, taus: dict, path, title: str = "stage delta") -> Path:
    """Thresholded delta maps: entries with |delta| <= tau are blanked, sign kept."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(taus) + 1, figsize=(3.2 * (len(taus) + 1), 3.0), squeeze=False)
        lim = _symmetric_limit(delta)
        panels = [("all", 0.0)] + list(taus.items())
        for ax, (label, tau) in zip(axes[0], panels):
            shown = np.where(np.abs(delta) > tau, delta, np.nan)
            np.fill_diagonal(shown, np.nan)
            im = ax.imshow(shown, cmap="coolwarm", vmin=-lim, vmax=lim)
            ax.set_title(f"{label} (tau={tau:.3g})" if label != "all" else "unthresholded")
            ax.set_xlabel("ROI")
        fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="increase (+) / decrease (-)")
        fig.suptitle(title)
        return _save(fig, path)


def plot_top_rois(delta: np.ndarray, rois, path, title: str = "top ROI delta") -> Path:
    """Delta restricted to the selected ROIs, labelled by ROI index."""
    rois = [int(r) for r in rois]
    sub = delta[np.ix_(rois, rois)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        lim = _symmetric_limit(sub)
        im = ax.imshow(sub, cmap="coolwarm", vmin=-lim, vmax=lim)
        ax.set_xticks(range(len(rois)), [str(r) for r in rois], rotation=90)
        ax.set_yticks(range(len(rois)), [str(r) for r in rois])
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def plot_history(history, path) -> Path:
    """Loss components and training accuracy against epoch."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        for key in ("loss_d_sc", "loss_d_fc", "loss_g_sc", "loss_g_fc", "loss_cls",
                    "loss_rcs_sc", "loss_rcs_fc"):
            ax1.plot(epochs, [h[key] for h in history], label=key, lw=1)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(fontsize=6)
        ax2.plot(epochs, [h["train_acc"] for h in history], color="k", lw=1)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("train accuracy")
        ax2.set_ylim(0, 1.02)
        return _save(fig, path)
