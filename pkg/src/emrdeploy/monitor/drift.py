"""Mean-shift drift monitoring over stored inference packets.

A window's mean of each quantity (per-feature count, prediction, label) is
compared with a baseline; a quantity is flagged when

    |mean_w - mean_b| / sqrt(var_p * (1/n_w + 1/n_b)) > k

where ``var_p`` is the variance of the baseline and window samples pooled
under the hypothesis of equal means. The baseline variance alone badly
understates the noise of rare features (a code seen twice in the baseline
has an estimated variance near zero). Features that are rare on both sides
(fewer than ``min_support`` occurrences) are not tested at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..clock import format_ts, parse_ts
from ..serve.store import PacketStore

DEFAULT_K = 4.0
MIN_SUPPORT = 5
PREDICTION = "prediction_mean"
LABEL = "label_mean"


def _moments(rows: Sequence[Mapping[int, int]]) -> tuple[dict[int, float], dict[int, float], dict[int, int]]:
    n = len(rows)
    s1: dict[int, float] = {}
    s2: dict[int, float] = {}
    support: dict[int, int] = {}
    for r in rows:
        for i, c in r.items():
            s1[i] = s1.get(i, 0.0) + c
            s2[i] = s2.get(i, 0.0) + c * c
            support[i] = support.get(i, 0) + 1
    means = {i: v / n for i, v in s1.items()}
    variances = {i: max(s2[i] / n - means[i] ** 2, 0.0) for i in s1}
    return means, variances, support


@dataclass
class DriftBaseline:
    n: int
    feature_means: dict[int, float]
    feature_vars: dict[int, float]
    prediction_mean: float
    prediction_var: float
    n_labeled: int
    label_mean: float
    label_var: float

    @classmethod
    def from_data(cls, features: Sequence[Mapping[int, int]], scores: Sequence[float],
                  labels: Sequence[bool] | None = None) -> DriftBaseline:
        if not features:
            raise ValueError("baseline needs at least one sample")
        means, variances, _ = _moments(features)
        s = np.asarray(scores, dtype=float)
        y = np.asarray(labels if labels is not None else [], dtype=float)
        return cls(len(features), means, variances, float(s.mean()), float(s.var()),
                   len(y), float(y.mean()) if len(y) else math.nan, float(y.var()) if len(y) else math.nan)

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "feature_means": {str(k): v for k, v in sorted(self.feature_means.items())},
                "feature_vars": {str(k): v for k, v in sorted(self.feature_vars.items())},
                "prediction_mean": self.prediction_mean, "prediction_var": self.prediction_var,
                "n_labeled": self.n_labeled, "label_mean": self.label_mean, "label_var": self.label_var}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DriftBaseline:
        return cls(int(d["n"]), {int(k): float(v) for k, v in d["feature_means"].items()},
                   {int(k): float(v) for k, v in d["feature_vars"].items()}, float(d["prediction_mean"]),
                   float(d["prediction_var"]), int(d["n_labeled"]), float(d["label_mean"]), float(d["label_var"]))


@dataclass
class DriftSnapshot:
    model_id: str
    window: tuple[datetime, datetime]
    n: int
    feature_means: dict[int, float] = field(default_factory=dict)
    feature_support: dict[int, int] = field(default_factory=dict)
    feature_vars: dict[int, float] = field(default_factory=dict)
    prediction_mean: float = math.nan
    prediction_var: float = math.nan
    n_labeled: int = 0
    label_mean: float = math.nan
    flags: list[tuple[str, float]] = field(default_factory=list)

    def to_dict(self, tokens: Sequence[str] | None = None) -> dict[str, Any]:
        def name(i: int) -> str:
            return tokens[i] if tokens is not None and i < len(tokens) else str(i)

        return {"model_id": self.model_id, "window": [format_ts(self.window[0]), format_ts(self.window[1])],
                "n": self.n, "feature_means": {name(i): v for i, v in sorted(self.feature_means.items())},
                "prediction_mean": self.prediction_mean, "n_labeled": self.n_labeled,
                "label_mean": self.label_mean, "flags": [[q, z] for q, z in self.flags]}


def snapshot_from_packets(model_id: str, window: tuple[datetime, datetime], features: Sequence[Mapping[int, int]],
                          scores: Sequence[float], labels: Iterable[bool | None]) -> DriftSnapshot:
    n = len(features)
    if n == 0:
        return DriftSnapshot(model_id, window, 0)
    means, variances, support = _moments(features)
    known = [bool(x) for x in labels if x is not None]
    return DriftSnapshot(model_id, window, n, means, support, variances, float(np.mean(scores)),
                         float(np.var(scores)), len(known), float(np.mean(known)) if known else math.nan)


def drift_snapshot(store: PacketStore, model_id: str, window: tuple[datetime, datetime],
                   baseline: DriftBaseline | None = None, k: float = DEFAULT_K) -> DriftSnapshot:
    """Means over packets with inference_time in ``[t0, t1)``; absent features count as zero."""
    packets = store.read_packets(model_id, window[0], window[1])
    snap = snapshot_from_packets(model_id, window, [p.feature_dict() for p in packets],
                                 [p.score for p in packets], [p.label for p in packets])
    if baseline is not None:
        snap.flags = drift_flag(snap, baseline, k)
    return snap


def pooled_z(mean_w: float, var_w: float, n_w: int, mean_b: float, var_b: float, n_b: int) -> float:
    """Two-sample z with the variance of the pooled sample (population variances as inputs)."""
    n = n_w + n_b
    mean = (n_w * mean_w + n_b * mean_b) / n
    var = (n_w * (var_w + (mean_w - mean) ** 2) + n_b * (var_b + (mean_b - mean) ** 2)) / n
    # Means that differ only by rounding (e.g. a constant score) are not a shift.
    if var <= 0 or abs(mean_w - mean_b) <= 1e-12 * max(1.0, abs(mean)):
        return 0.0
    return (mean_w - mean_b) / math.sqrt(var * (1.0 / n_w + 1.0 / n_b))


def drift_flag(snapshot: DriftSnapshot, baseline: DriftBaseline, k: float = DEFAULT_K,
               min_support: int = MIN_SUPPORT) -> list[tuple[str, float]]:
    """Quantities whose window mean sits more than ``k`` standard errors from the baseline."""
    if snapshot.n == 0:
        return []
    flags: list[tuple[str, float]] = []
    for i in sorted(set(snapshot.feature_means) | set(baseline.feature_means)):
        mean_w = snapshot.feature_means.get(i, 0.0)
        base_count = baseline.feature_means.get(i, 0.0) * baseline.n
        if snapshot.feature_support.get(i, 0) < min_support and base_count < min_support:
            continue
        z = pooled_z(mean_w, snapshot.feature_vars.get(i, 0.0), snapshot.n, baseline.feature_means.get(i, 0.0),
                     baseline.feature_vars.get(i, 0.0), baseline.n)
        if abs(z) > k:
            flags.append((f"feature:{i}", z))
    z = pooled_z(snapshot.prediction_mean, snapshot.prediction_var, snapshot.n, baseline.prediction_mean,
                 baseline.prediction_var, baseline.n)
    if abs(z) > k:
        flags.append((PREDICTION, z))
    if snapshot.n_labeled and baseline.n_labeled:
        p = snapshot.label_mean
        z = pooled_z(p, p * (1 - p), snapshot.n_labeled, baseline.label_mean, baseline.label_var, baseline.n_labeled)
        if abs(z) > k:
            flags.append((LABEL, z))
    return flags


def parse_window(a: str, b: str) -> tuple[datetime, datetime]:
    return parse_ts(a), parse_ts(b)
