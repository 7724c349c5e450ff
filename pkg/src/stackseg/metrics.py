"""Overlap metrics on binary masks."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def _pair(pred, target):
    p = np.asarray(pred).astype(bool)
    t = np.asarray(target).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"metric inputs differ in shape: {p.shape} vs {t.shape}")
    return p, t


def dice_score(pred_bin, target) -> float:
    """``2|P & T| / (|P| + |T|)``; 1.0 when both masks are empty."""
    p, t = _pair(pred_bin, target)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, t).sum() / denom


def iou(pred_bin, target) -> float:
    p, t = _pair(pred_bin, target)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, t).sum() / union


def mean_iou(pred_bin, target) -> float:
    """Mean of foreground and background IoU."""
    p, t = _pair(pred_bin, target)
    return 0.5 * (iou(p, t) + iou(~p, ~t))


def symmetric_difference(masks) -> float:
    """Mean fraction of pixels that flip between consecutive slices."""
    masks = [np.asarray(m).astype(bool) for m in masks]
    if len(masks) < 2:
        return 0.0
    return float(np.mean([np.logical_xor(a, b).mean() for a, b in zip(masks[:-1], masks[1:])]))
