"""Segmentation quality and shift-stability metrics for defect masks.

Test crops are grouped by the raw image they were cut from. Within a group the
spread of per-crop IoU and of the predicted defect area (largest 8-connected
blob) measures how much the prediction moves when the window slides by one
pixel; the mean of these unbiased variances over groups gives mvIoU and mvda.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor import ShapeError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class SubsetGroup:
    raw_id: str
    samples: list = field(default_factory=list)  # (pred mask, gt mask, offset)


@dataclass
class EquivReport:
    mIoU: float
    precision: float
    recall: float
    f1: float
    mvIoU: float
    mvda: float
    subset_miou: list = field(default_factory=list)
    subset_marea: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("mIoU", "precision", "recall", "f1", "mvIoU", "mvda")}


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def largest_cc_area(mask) -> int:
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT_CONNECTED)
    if n == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def subset_stats(group: SubsetGroup) -> tuple[float, float]:
    """(mean IoU, mean largest-component area) of one group."""
    if not group.samples:
        raise ValueError(f"subset {group.raw_id!r} is empty")
    ious = [iou(p, g) for p, g, _ in group.samples]
    areas = [largest_cc_area(p) for p, _, _ in group.samples]
    return float(np.mean(ious)), float(np.mean(areas))


def _mean_variance(groups, value_fn) -> float:
    if not groups:
        raise ValueError("no subsets given")
    variances = []
    for g in groups:
        if len(g.samples) < 2:
            raise ValueError(f"subset {g.raw_id!r} needs at least 2 samples for a variance")
        vals = np.array([value_fn(p, t) for p, t, _ in g.samples], dtype=np.float64)
        variances.append(np.var(vals, ddof=1))
    return float(np.mean(variances))


def mviou(groups) -> float:
    return _mean_variance(groups, iou)


def mvda(groups) -> float:
    return _mean_variance(groups, lambda p, _: largest_cc_area(p))


def pixel_prf(preds, gts) -> tuple[float, float, float]:
    """Micro-averaged pixel precision, recall and F1 over a whole test set."""
    tp = fp = fn = 0
    for p, g in zip(preds, gts, strict=True):
        p, g = _pair(p, g)
        tp += np.count_nonzero(p & g)
        fp += np.count_nonzero(p & ~g)
        fn += np.count_nonzero(~p & g)
    if tp + fp == 0:
        precision = 1.0 if fn == 0 else 0.0
    else:
        precision = tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(precision), float(recall), float(f1)


def equiv_report(groups) -> EquivReport:
    stats = [subset_stats(g) for g in groups]
    preds = [p for g in groups for p, _, _ in g.samples]
    gts = [t for g in groups for _, t, _ in g.samples]
    precision, recall, f1 = pixel_prf(preds, gts)
    return EquivReport(
        mIoU=float(np.mean([s[0] for s in stats])),
        precision=precision,
        recall=recall,
        f1=f1,
        mvIoU=mviou(groups),
        mvda=mvda(groups),
        subset_miou=[s[0] for s in stats],
        subset_marea=[s[1] for s in stats],
    )
