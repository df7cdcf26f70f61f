"""Evaluation metrics: Dice score, HD95 and a thresholded IoU sweep."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def dsc_metric(pred_mask: np.ndarray, gt_mask: np.ndarray, cls: int) -> float:
    """Dice similarity in percent for one class; 100 when both masks lack the class."""
    a = np.asarray(pred_mask) == cls
    b = np.asarray(gt_mask) == cls
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 100.0
    return 200.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background or out-of-image 4-neighbour."""
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    inner = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return np.asarray(mask, dtype=bool) & ~inner


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every ``src`` pixel to the nearest ``dst`` pixel."""
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def hd95_with_flag(pred_mask: np.ndarray, gt_mask: np.ndarray, cls: int) -> tuple[float, str | None]:
    """HD95 in pixels and a flag naming any degenerate case.

    Boundary-to-boundary distances in both directions are pooled and the
    95th percentile (linear interpolation) taken.  If only one side has the
    class the image diagonal is returned with flag ``"empty_pred"`` or
    ``"empty_gt"``; if neither does, 0 with ``"both_empty"``.
    """
    a = np.asarray(pred_mask) == cls
    b = np.asarray(gt_mask) == cls
    if not a.any() and not b.any():
        return 0.0, "both_empty"
    if not a.any() or not b.any():
        h, w = a.shape
        return math.hypot(h, w), "empty_pred" if not a.any() else "empty_gt"
    ba, bb = boundary(a), boundary(b)
    pooled = np.concatenate([_directed(ba, bb), _directed(bb, ba)])
    return float(np.percentile(pooled, 95)), None


def hd95_metric(pred_mask: np.ndarray, gt_mask: np.ndarray, cls: int) -> float:
    return hd95_with_flag(pred_mask, gt_mask, cls)[0]


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def miou_sweep(prob_map: np.ndarray, gt_mask: np.ndarray) -> tuple[float, list[float]]:
    """Binarize the foreground probability at 0.50, 0.55, ..., 0.95 (strictly above) and average IoU."""
    prob_map = np.asarray(prob_map, dtype=np.float64)
    gt = np.asarray(gt_mask) > 0
    per = [iou(prob_map > t, gt) for t in IOU_THRESHOLDS]
    return float(np.mean(per)), per


@dataclass
class MetricReport:
    """Per-class DSC (%) and HD95 (pixels) for one case, plus the IoU sweep."""

    case_id: str
    dsc: dict[int, float] = field(default_factory=dict)
    hd95: dict[int, float] = field(default_factory=dict)
    hd95_flags: dict[int, str] = field(default_factory=dict)
    miou: float | None = None
    iou_per_threshold: list[float] | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.case_id,
            "dsc": {str(k): v for k, v in self.dsc.items()},
            "hd95": {str(k): v for k, v in self.hd95.items()},
            "hd95_flags": {str(k): v for k, v in self.hd95_flags.items()},
            "miou": self.miou,
            "iou_per_threshold": self.iou_per_threshold,
        }


def evaluate_case(case_id: str, pred_mask: np.ndarray, gt_mask: np.ndarray, num_classes: int,
                  prob_map: np.ndarray | None = None) -> MetricReport:
    """Metrics over foreground classes 1..K-1; the IoU sweep uses ``prob_map`` or the binary prediction."""
    rep = MetricReport(case_id)
    for c in range(1, num_classes):
        rep.dsc[c] = dsc_metric(pred_mask, gt_mask, c)
        value, flag = hd95_with_flag(pred_mask, gt_mask, c)
        rep.hd95[c] = value
        if flag:
            rep.hd95_flags[c] = flag
    fg_prob = prob_map if prob_map is not None else (np.asarray(pred_mask) > 0).astype(np.float64)
    rep.miou, rep.iou_per_threshold = miou_sweep(fg_prob, gt_mask)
    return rep


def summarize(reports: list[MetricReport], num_classes: int) -> dict:
    """JSON-ready report: per-case entries and per-class means (plus the overall mean)."""
    classes = list(range(1, num_classes))
    mean_dsc = {str(c): float(np.mean([r.dsc[c] for r in reports])) for c in classes}
    mean_hd = {str(c): float(np.mean([r.hd95[c] for r in reports])) for c in classes}
    ious = np.array([r.iou_per_threshold for r in reports], dtype=np.float64)
    return {
        "num_classes": num_classes,
        "thresholds": list(IOU_THRESHOLDS),
        "cases": [r.to_dict() for r in reports],
        "mean": {
            "dsc": mean_dsc,
            "hd95": mean_hd,
            "dsc_all": float(np.mean(list(mean_dsc.values()))),
            "hd95_all": float(np.mean(list(mean_hd.values()))),
            "miou": float(ious.mean()),
            "iou_per_threshold": ious.mean(axis=0).tolist(),
        },
    }


def mean_foreground_dsc(pred_masks, gt_masks, num_classes: int) -> float:
    """Mean over cases and foreground classes of DSC, as a fraction in [0, 1]."""
    vals = [dsc_metric(p, g, c) for p, g in zip(pred_masks, gt_masks) for c in range(1, num_classes)]
    return float(np.mean(vals)) / 100.0
