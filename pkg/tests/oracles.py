"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import math
import random
from datetime import datetime, timedelta, timezone

import numpy as np

UTC = timezone.utc


# ------------------------------------------------------------------ metrics
def auroc_pairs(scores, labels) -> float:
    """Exhaustive pair count: wins plus half ties over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return math.nan
    twice = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return twice / (2 * len(pos) * len(neg))


def confusion_by_hand(scores, labels, threshold):
    tp = fp = fn = tn = 0
    for s, y in zip(scores, labels):
        if s >= threshold:
            if y:
                tp += 1
            else:
                fp += 1
        elif y:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def net_benefit_direct(scores, labels, pt):
    tp, fp, _, _ = confusion_by_hand(scores, labels, pt)
    n = len(scores)
    return tp / n - (fp / n) * pt / (1 - pt)


def tied_sample(rng: random.Random, n_max: int = 50):
    """Scores on a coarse grid (so ties are common) with both classes present."""
    n = rng.randint(2, n_max)
    scores = [rng.randint(0, 10) / 10 for _ in range(n)]
    labels = [rng.random() < 0.4 for _ in range(n)]
    labels[0], labels[1] = True, False
    return scores, labels


# ---------------------------------------------------------------- bootstrap
def bootstrap_reference(scores, labels, B=1000, level=0.95, seed=0):
    """Same resampling protocol, pair-count AUROC and numpy's inverted-CDF quantile."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(B):
        idx = rng.integers(0, len(s), size=len(s))
        vals.append(auroc_pairs(s[idx].tolist(), y[idx].tolist()))
    vals = np.array([v for v in vals if not math.isnan(v)])
    tail = round((1 - level) / 2, 12)  # 0.025, not 0.025000000000000022
    lo, hi = np.quantile(vals, [tail, 1 - tail], method="inverted_cdf")
    return float(lo), auroc_pairs(scores, labels), float(hi)


# --------------------------------------------------------------------- cron
def _expand(field: str, lo: int, hi: int) -> set[int]:
    out: set[int] = set()
    for part in field.split(","):
        step = 1
        if "/" in part:
            part, step_s = part.split("/")
            step = int(step_s)
            if part != "*" and "-" not in part:
                part = f"{part}-{hi}"
        if part == "*":
            a, b = lo, hi
        elif "-" in part:
            a, b = (int(x) for x in part.split("-"))
        else:
            a = b = int(part)
        out.update(v for v in range(a, b + 1) if (v - a) % step == 0)
    return out


def cron_next_oracle(expr: str, after: datetime) -> datetime:
    """Walk forward one minute at a time (skipping whole non-matching days)."""
    mi, hr, dom, mon, dow = expr.split()
    minutes, hours = _expand(mi, 0, 59), _expand(hr, 0, 23)
    days, months = _expand(dom, 1, 31), _expand(mon, 1, 12)
    weekdays = {d % 7 for d in _expand(dow, 0, 7)}
    dom_star, dow_star = dom.startswith("*"), dow.startswith("*")

    def day_ok(t: datetime) -> bool:
        if t.month not in months:
            return False
        d_ok = t.day in days
        w_ok = t.isoweekday() % 7 in weekdays
        if not dom_star and not dow_star:
            return d_ok or w_ok
        return (dom_star or d_ok) and (dow_star or w_ok)

    t = after.astimezone(UTC).replace(second=0, microsecond=0) + timedelta(minutes=1)
    limit = t + timedelta(days=366 * 9)
    while t < limit:
        if not day_ok(t):
            t = (t + timedelta(days=1)).replace(hour=0, minute=0)
            continue
        if t.hour in hours and t.minute in minutes:
            return t
        t += timedelta(minutes=1)
    raise AssertionError(f"no match for {expr!r}")


def random_cron_field(rng: random.Random, lo: int, hi: int) -> str:
    def item() -> str:
        kind = rng.randrange(5)
        a = rng.randint(lo, hi)
        b = rng.randint(a, hi)
        step = rng.randint(1, max(1, (hi - lo) // 2))
        return ["*", str(a), f"{a}-{b}", f"*/{step}", f"{a}-{b}/{step}"][kind]

    if rng.random() < 0.35:
        return "*"
    return ",".join(item() for _ in range(rng.randint(1, 3)))


def random_cron(rng: random.Random) -> str:
    while True:
        fields = [random_cron_field(rng, lo, hi) for lo, hi in ((0, 59), (0, 23), (1, 31), (1, 12), (0, 7))]
        expr = " ".join(fields)
        # Skip combinations that can never fire (e.g. day 31 only in February).
        try:
            cron_next_oracle(expr, datetime(2020, 1, 1, tzinfo=UTC))
        except AssertionError:
            continue
        return expr


def random_instant(rng: random.Random) -> datetime:
    base = datetime(2015, 1, 1, tzinfo=UTC)
    return base + timedelta(seconds=rng.randrange(0, 12 * 365 * 86400))
