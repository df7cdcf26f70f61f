"""Report figures written next to the JSON/CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(losses, path, val=None, window: int = 50):
    """Per-iteration loss, its moving average, and validation DSC on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        it = np.arange(len(losses))
        ax.plot(it, losses, lw=0.6, alpha=0.5, color="0.4", label="loss")
        if len(losses) >= window:
            ma = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(it[window - 1:], ma, lw=1.4, color="C0", label=f"{window}-iter mean")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        if val:
            ax2 = ax.twinx()
            vi, vd = zip(*val)
            ax2.plot(vi, vd, "o-", color="C3", ms=3, lw=1, label="val DSC")
            ax2.set_ylabel("val DSC")
            ax2.set_ylim(0, 1)
        ax.legend(loc="upper right")
        return _save(fig, path)


def ablation_bars(report: dict, path):
    summary = report["summary"]
    names = list(summary)
    means = [summary[n]["mean"] for n in names]
    sds = [summary[n]["sd"] for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(names, means, yerr=sds, capsize=4, color=["C0", "C1", "C2"][:len(names)])
        for e in report["entries"]:
            ax.plot(names.index(e["variant"]), e["val_dsc"], "k.", ms=4)
        ax.set_ylabel("val DSC (mean ± sd)")
        ax.set_ylim(0, 1)
        return _save(fig, path)


def prediction_panel(image, pred_mask, path, gt_mask=None, num_classes: int | None = None):
    panels = [("image", image)] + [("prediction", pred_mask)] + ([("ground truth", gt_mask)] if gt_mask is not None else [])
    vmax = (num_classes - 1) if num_classes else max(int(np.max(pred_mask)), 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.4 * len(panels), 2.6))
        for ax, (title, arr) in zip(np.atleast_1d(axes), panels):
            if title == "image":
                ax.imshow(arr[0] if arr.ndim == 3 else arr, cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(arr, cmap="viridis", vmin=0, vmax=vmax, interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)


def iou_sweep(thresholds, ious, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(thresholds, ious, "o-")
        ax.set_xlabel("threshold")
        ax.set_ylabel("IoU")
        ax.set_ylim(0, 1.02)
        return _save(fig, path)
