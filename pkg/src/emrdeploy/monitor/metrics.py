"""Weighted performance metrics.

Every kernel takes parallel ``scores``, ``labels`` and optional ``weights``;
with all weights equal to one they reduce exactly to the unweighted
definitions. A sample is predicted positive iff ``score >= threshold``.
Undefined quantities are NaN rather than errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_CALIBRATION_BINS = 10


class DegenerateCurveError(ValueError):
    pass


def _arrays(scores, labels, weights=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    w = np.ones(len(s)) if weights is None else np.asarray(weights, dtype=float)
    if not (len(s) == len(y) == len(w)):
        raise ValueError("scores, labels and weights must have equal length")
    return s, y, w


def _grouped(s: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unique scores ascending with the positive and negative weight at each."""
    uniq, inv = np.unique(s, return_inverse=True)
    pos = np.bincount(inv, weights=w * y, minlength=len(uniq))
    neg = np.bincount(inv, weights=w * ~y, minlength=len(uniq))
    return uniq, pos, neg


def auroc(scores, labels, weights=None) -> float:
    """P(random positive outranks random negative), ties counted one half; NaN if a class is empty."""
    s, y, w = _arrays(scores, labels, weights)
    _, pos, neg = _grouped(s, y, w)
    w_pos, w_neg = pos.sum(), neg.sum()
    if w_pos == 0 or w_neg == 0:
        return math.nan
    neg_below = np.cumsum(neg) - neg
    # Doubled to keep unit-weight sums integral until the single final division.
    twice = float(np.sum(pos * (2 * neg_below + neg)))
    return twice / (2 * w_pos * w_neg)


def prevalence(scores, labels, weights=None) -> float:
    _, y, w = _arrays(scores, labels, weights)
    total = w.sum()
    return float((w * y).sum() / total) if total > 0 else math.nan


def roc_curve(scores, labels, weights=None) -> list[tuple[float, float]]:
    """(fpr, tpr) from (0, 0) through every distinct score cut to (1, 1)."""
    s, y, w = _arrays(scores, labels, weights)
    _, pos, neg = _grouped(s, y, w)
    w_pos, w_neg = pos.sum(), neg.sum()
    if w_pos == 0 or w_neg == 0:
        raise DegenerateCurveError("ROC needs both classes")
    tp = np.cumsum(pos[::-1])
    fp = np.cumsum(neg[::-1])
    return [(0.0, 0.0)] + [(float(f / w_neg), float(t / w_pos)) for f, t in zip(fp, tp)]


def pr_curve(scores, labels, weights=None) -> list[tuple[float, float]]:
    """(recall, precision) at every distinct score cut, highest cut first."""
    s, y, w = _arrays(scores, labels, weights)
    _, pos, neg = _grouped(s, y, w)
    w_pos, w_neg = pos.sum(), neg.sum()
    if w_pos == 0 or w_neg == 0:
        raise DegenerateCurveError("PR needs both classes")
    tp = np.cumsum(pos[::-1])
    fp = np.cumsum(neg[::-1])
    return [(float(t / w_pos), float(t / (t + f))) for t, f in zip(tp, fp)]


def average_precision(scores, labels, weights=None) -> float:
    """Step-wise area under the PR curve: sum of precision times recall increments."""
    s, y, w = _arrays(scores, labels, weights)
    if (w * y).sum() == 0 or (w * ~y).sum() == 0:
        return math.nan
    prev_r = 0.0
    total = 0.0
    for r, p in pr_curve(s, y, w):
        total += (r - prev_r) * p
        prev_r = r
    return total


@dataclass(frozen=True)
class CalibrationBin:
    index: int
    mean_score: float
    frac_positive: float
    n: int


def calibration_bins(scores, labels, weights=None, n_bins: int = N_CALIBRATION_BINS) -> list[CalibrationBin]:
    """Equal-width bins over [0, 1]; a score of exactly 1 falls in the last bin; empty bins omitted."""
    s, y, w = _arrays(scores, labels, weights)
    idx = np.minimum(np.floor(s * n_bins).astype(int), n_bins - 1)
    out = []
    for b in range(n_bins):
        m = idx == b
        if not m.any():
            continue
        wb = w[m]
        out.append(CalibrationBin(b, float((wb * s[m]).sum() / wb.sum()), float((wb * y[m]).sum() / wb.sum()),
                                  int(m.sum())))
    return out


def curves(scores, labels, kind: str, weights=None):
    if kind == "ROC":
        return roc_curve(scores, labels, weights)
    if kind == "PR":
        return pr_curve(scores, labels, weights)
    if kind == "Calibration":
        return calibration_bins(scores, labels, weights)
    raise ValueError(f"unknown curve kind {kind!r}")


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.nan


def confusion_at_threshold(scores, labels, threshold: float, weights=None) -> dict[str, float]:
    s, y, w = _arrays(scores, labels, weights)
    pred = s >= threshold
    tp = float((w * (pred & y)).sum())
    fp = float((w * (pred & ~y)).sum())
    fn = float((w * (~pred & y)).sum())
    tn = float((w * (~pred & ~y)).sum())
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "accuracy": _ratio(tp + tn, tp + fp + fn + tn),
            "sensitivity": _ratio(tp, tp + fn),
            "specificity": _ratio(tn, tn + fp),
            "ppv": _ratio(tp, tp + fp)}


def default_pt_grid() -> list[float]:
    return [round(0.05 * i, 2) for i in range(1, 20)]


def net_benefit(scores, labels, pt_grid: Sequence[float], weights=None) -> list[dict[str, float]]:
    """Decision curve: NB = TP/n - FP/n * pt/(1-pt), with treat-all and treat-none references."""
    s, y, w = _arrays(scores, labels, weights)
    n = w.sum()
    prev = (w * y).sum() / n if n > 0 else math.nan
    out = []
    for pt in pt_grid:
        if not 0.0 < pt < 1.0:
            raise ValueError(f"threshold probability must be in (0, 1), got {pt}")
        odds = pt / (1 - pt)
        pred = s >= pt
        tp = (w * (pred & y)).sum()
        fp = (w * (pred & ~y)).sum()
        out.append({"pt": float(pt), "model": float(tp / n - fp / n * odds),
                    "treat_all": float(prev - (1 - prev) * odds), "treat_none": 0.0})
    return out
