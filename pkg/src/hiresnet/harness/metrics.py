"""Confusion-matrix segmentation metrics: per-class IoU / F1, their means,
and overall pixel accuracy. Classes never seen in ground truth or prediction
are excluded from the means."""

from __future__ import annotations

import numpy as np


def new_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def update_confusion(cm, pred_labels, gt_labels):
    """Accumulate counts; rows index ground truth, columns prediction."""
    k = cm.shape[0]
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("prediction/label shapes differ")
    for name, arr in (("prediction", pred), ("label", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} ids outside [0, {k})")
    cm += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    return cm


def metrics(cm):
    """Returns dict: iou, f1 (per class, nan when excluded), miou, mean_f1, oa."""
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    seen = (tp + fp + fn) > 0
    iou = np.full(cm.shape[0], np.nan)
    f1 = np.full(cm.shape[0], np.nan)
    iou[seen] = tp[seen] / (tp + fp + fn)[seen]
    f1[seen] = 2 * tp[seen] / (2 * tp + fp + fn)[seen]
    return {
        "iou": iou,
        "f1": f1,
        "miou": float(np.mean(iou[seen])),
        "mean_f1": float(np.mean(f1[seen])),
        "oa": float(tp.sum() / total),
    }
