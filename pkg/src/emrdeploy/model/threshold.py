"""Operating-point selection on validation scores."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

FALLBACK_THRESHOLD = 0.5


def youden_cuts(scores: Sequence[float], labels: Sequence[bool]) -> list[tuple[float, float, float]]:
    """(cut, sensitivity, specificity) for each unique score, predicting positive iff score >= cut."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    order = np.argsort(-s, kind="stable")
    s_desc, y_desc = s[order], y[order]
    tp = np.cumsum(y_desc)
    fp = np.cumsum(~y_desc)
    last = np.r_[s_desc[1:] != s_desc[:-1], True]  # final position of each unique score
    return [(float(c), t / n_pos, 1 - f / n_neg) for c, t, f in zip(s_desc[last], tp[last], fp[last])]


def select_threshold(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Youden's J over unique score cuts; ties go to the higher cut (higher specificity).

    The returned threshold is the midpoint between the winning cut and the next
    lower unique score, so it sits inside the gap the cut defines. Degenerate
    inputs fall back to 0.5.
    """
    y = np.asarray(labels, dtype=bool)
    if len(y) == 0 or y.all() or not y.any():
        log.warning("single-class validation labels; using threshold %.1f", FALLBACK_THRESHOLD)
        return FALLBACK_THRESHOLD
    cuts = youden_cuts(scores, labels)  # descending cut order
    best_i, best_j = -1, 0.0
    for i, (_, sens, spec) in enumerate(cuts):
        j = sens + spec - 1
        if j > best_j + 1e-12:
            best_i, best_j = i, j
    if best_i < 0:
        log.warning("no cut has positive Youden's J; using threshold %.1f", FALLBACK_THRESHOLD)
        return FALLBACK_THRESHOLD
    cut = cuts[best_i][0]
    lower = cuts[best_i + 1][0] if best_i + 1 < len(cuts) else 0.0
    return (cut + lower) / 2
