"""Pixel-level localization metrics, computed per image.

Conventions:
  * ``f1_at`` binarizes with ``pred >= threshold``.  Empty prediction on empty
    ground truth scores 1.0; any positive prediction on empty ground truth 0.0.
  * ``f1_optimal`` takes the best of 256 thresholds ``i / 256``, i = 0..255.
  * ``pixel_auc`` is the Mann-Whitney statistic with midranks for ties and is
    undefined (``None``) when the ground truth has only one class.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

N_THRESHOLDS = 256
THRESHOLDS = np.arange(N_THRESHOLDS) / N_THRESHOLDS


class MetricShapeError(ValueError):
    pass


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise MetricShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p.ravel(), g.ravel().astype(bool)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom == 0, 1.0, 2 * tp / np.maximum(denom, 1))


def f1_at(pred, gt, threshold: float = 0.5) -> float:
    p, g = _check(pred, gt)
    b = p >= threshold
    tp = int(np.sum(b & g))
    fp = int(np.sum(b & ~g))
    fn = int(np.sum(~b & g))
    return float(_f1(tp, fp, fn))


def f1_curve(pred, gt, thresholds=THRESHOLDS) -> np.ndarray:
    """F1 at every threshold, vectorized with a sorted scan."""
    p, g = _check(pred, gt)
    order = np.sort(p)
    order_pos = np.sort(p[g])
    # count of predictions >= t
    n_ge = p.size - np.searchsorted(order, thresholds, side="left")
    tp = g.sum() - np.searchsorted(order_pos, thresholds, side="left")
    fp = n_ge - tp
    fn = g.sum() - tp
    return _f1(tp, fp, fn)


def f1_optimal(pred, gt) -> float:
    return float(f1_curve(pred, gt).max())


def pixel_auc(pred, gt):
    p, g = _check(pred, gt)
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(p, method="average")
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
