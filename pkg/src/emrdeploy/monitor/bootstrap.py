"""Percentile bootstrap confidence intervals with nearest-rank percentiles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

Metric = Callable[[np.ndarray, np.ndarray, np.ndarray], float]


@dataclass(frozen=True)
class BootstrapCI:
    lo: float
    point: float
    hi: float
    n_resamples: int
    n_nan: int
    level: float

    def as_tuple(self) -> tuple[float, float, float]:
        return self.lo, self.point, self.hi


def percentile_ranks(m: int, level: float) -> tuple[int, int]:
    """1-based nearest ranks of the lower and upper tail quantiles among ``m`` sorted values."""
    tail = (1 - Fraction(level).limit_denominator(10**6)) / 2
    lo_rank = max(1, math.ceil(tail * m))
    hi_rank = max(1, math.ceil((1 - tail) * m))
    return lo_rank, hi_rank


def bootstrap_ci(metric: Metric, scores: Sequence[float], labels: Sequence[bool],
                 weights: Sequence[float] | None = None, B: int = 1000, level: float = 0.95,
                 seed: int = 0) -> BootstrapCI:
    """Resample rows with replacement ``B`` times, one ``integers(0, n, n)`` draw per resample.

    Resamples where the metric is NaN are dropped and counted; if all are NaN
    the interval is (NaN, point, NaN).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    w = np.ones(len(s)) if weights is None else np.asarray(weights, dtype=float)
    n = len(s)
    if n == 0:
        raise ValueError("bootstrap of an empty sample")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    point = float(metric(s, y, w))
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(B):
        idx = rng.integers(0, n, size=n)
        values.append(float(metric(s[idx], y[idx], w[idx])))
    finite = sorted(v for v in values if not math.isnan(v))
    n_nan = B - len(finite)
    if not finite:
        return BootstrapCI(math.nan, point, math.nan, B, n_nan, level)
    lo_rank, hi_rank = percentile_ranks(len(finite), level)
    return BootstrapCI(finite[lo_rank - 1], point, finite[hi_rank - 1], B, n_nan, level)
