"""Retrospective cohort: per-year random samples of orders labelled from results."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Sequence

import numpy as np

from ..emr.catalog import PANELS
from ..emr.warehouse import Warehouse

log = logging.getLogger(__name__)

TRAIN, VALIDATION, TEST = "Train", "Validation", "Test"
SPLITS = (TRAIN, VALIDATION, TEST)


class InvalidTask(ValueError):
    pass


@dataclass(frozen=True)
class CohortRow:
    order_id: str
    patient_id: str
    panel_code: str
    component_code: str
    inference_time: datetime
    label: bool
    split: str


def split_for_year(year: int, years: Sequence[int]) -> str:
    """All but the last two years train; the second-to-last validates; the last tests."""
    ordered = sorted(years)
    if year == ordered[-1]:
        return TEST
    if year == ordered[-2]:
        return VALIDATION
    return TRAIN


@dataclass
class Cohort:
    rows: list[CohortRow]
    dropped_missing_result: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def split(self, name: str) -> list[CohortRow]:
        return [r for r in self.rows if r.split == name]

    def prevalence(self, name: str | None = None) -> float:
        rows = self.rows if name is None else self.split(name)
        return sum(r.label for r in rows) / len(rows) if rows else float("nan")


def build_cohort(warehouse: Warehouse, panel_code: str, component_code: str, per_year: int,
                 years: Iterable[int], seed: int) -> Cohort:
    """Sample ``per_year`` orders of the panel per calendar year without replacement.

    Years with fewer orders contribute all of them. The sample for each year
    depends only on ``(seed, year)`` and the year's orders, so adding a year
    leaves the others unchanged.
    """
    if panel_code not in PANELS:
        raise InvalidTask(f"unknown panel {panel_code!r}")
    if component_code not in PANELS[panel_code]:
        raise InvalidTask(f"{component_code} is not a component of {panel_code}")
    if per_year < 1:
        raise InvalidTask("per_year must be >= 1")
    years = sorted(set(years))
    if len(years) < 3:
        raise InvalidTask("need at least three years for train/validation/test splits")

    by_year: dict[int, list] = {y: [] for y in years}
    for o in warehouse.orders.values():
        if o.panel_code == panel_code and o.order_time.year in by_year:
            by_year[o.order_time.year].append(o)

    rows: list[CohortRow] = []
    dropped = 0
    for year in years:
        pool = sorted(by_year[year], key=lambda o: o.order_id)
        if len(pool) > per_year:
            rng = np.random.default_rng([int(seed), year])
            picks = np.sort(rng.choice(len(pool), per_year, replace=False))
            pool = [pool[i] for i in picks]
        split = split_for_year(year, years)
        for o in pool:
            res = warehouse.result(o.order_id, component_code)
            if res is None:
                dropped += 1
                continue
            rows.append(CohortRow(o.order_id, o.patient_id, panel_code, component_code,
                                  o.order_time, res.abnormal, split))
    if dropped:
        log.warning("dropped %d sampled orders without a %s result", dropped, component_code)
    rows.sort(key=lambda r: (r.inference_time, r.order_id))
    return Cohort(rows, dropped)
