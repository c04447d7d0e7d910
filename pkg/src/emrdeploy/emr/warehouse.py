"""Flat-file warehouse export of the simulated EMR and its reader.

Four tab-separated tables with one header line and RFC3339 timestamps::

    patients(patient_id, birth_date, sex, race, unit_id)
    events(patient_id, kind, code, numeric_value, abnormal, effective_time)
    orders(order_id, patient_id, panel_code, order_time)
    results(order_id, component_code, value, ref_low, ref_high, abnormal, result_time)
"""

from __future__ import annotations

import bisect
import csv
import math
import os
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Iterable

from ..clock import format_ts, parse_ts, to_epoch
from .catalog import PANELS
from .world import ClinicalEvent, DiagnosticOrder, LabResult, PatientRecord, World

TABLES = {
    "patients": ("patient_id", "birth_date", "sex", "race", "unit_id"),
    "events": ("patient_id", "kind", "code", "numeric_value", "abnormal", "effective_time"),
    "orders": ("order_id", "patient_id", "panel_code", "order_time"),
    "results": ("order_id", "component_code", "value", "ref_low", "ref_high", "abnormal", "result_time"),
}


class WarehouseFormatError(ValueError):
    pass


def _bool(b: bool | None) -> str:
    return "" if b is None else ("true" if b else "false")


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def export_warehouse(world: World, up_to: datetime | None, dest: str | os.PathLike) -> dict[str, Path]:
    """Write every fact with effective time <= ``up_to`` (None means all facts).

    Patient rows carry no timestamp; they are exported whenever the cut-off lies
    after the world's origin, so a cut-off at the origin yields header-only files.
    """
    dest = Path(dest)
    try:
        dest.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create warehouse directory {dest}: {exc}") from exc
    include_patients = up_to is None or up_to > world.start_time
    paths = {name: dest / f"{name}.tsv" for name in TABLES}
    with world._lock:
        with open(paths["patients"], "w", newline="", encoding="utf-8") as fh:
            fh.write("\t".join(TABLES["patients"]) + "\n")
            if include_patients:
                for p in world.patients.values():
                    fh.write(f"{p.patient_id}\t{p.birth_date.isoformat()}\t{p.sex}\t{p.race}\t{p.unit_id}\n")
        with open(paths["events"], "w", newline="", encoding="utf-8") as fh:
            fh.write("\t".join(TABLES["events"]) + "\n")
            for pid in world.patients:
                for e in world.events(pid, until=up_to):
                    fh.write(f"{pid}\t{e.kind}\t{e.code}\t{_num(e.numeric_value)}\t{_bool(e.abnormal)}\t"
                             f"{format_ts(e.effective_time)}\n")
        with open(paths["orders"], "w", newline="", encoding="utf-8") as fh, \
                open(paths["results"], "w", newline="", encoding="utf-8") as rh:
            fh.write("\t".join(TABLES["orders"]) + "\n")
            rh.write("\t".join(TABLES["results"]) + "\n")
            for oid, order in world.orders.items():
                if up_to is not None and order.order_time > up_to:
                    continue
                fh.write(f"{oid}\t{order.patient_id}\t{order.panel_code}\t{format_ts(order.order_time)}\n")
                if oid in world.withheld:
                    continue
                for r in world.results.get(oid, ()):
                    if up_to is not None and r.result_time > up_to:
                        continue
                    rh.write(f"{oid}\t{r.component_code}\t{r.value!r}\t{r.ref_low!r}\t{r.ref_high!r}\t"
                             f"{_bool(r.abnormal)}\t{format_ts(r.result_time)}\n")
    return paths


def _read(path: Path, expected: tuple[str, ...]) -> Iterable[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        header = next(reader, None)
        if header is None or tuple(header) != expected:
            raise WarehouseFormatError(f"{path.name}: bad header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise WarehouseFormatError(f"{path.name}:{lineno}: expected {len(expected)} fields, got {len(row)}")
            yield row


def _parse_bool(text: str) -> bool | None:
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    raise WarehouseFormatError(f"bad boolean {text!r}")


@dataclass
class Warehouse:
    """In-memory warehouse tables with a per-patient event index."""

    patients: dict[str, PatientRecord] = field(default_factory=dict)
    events: list[ClinicalEvent] = field(default_factory=list)
    orders: dict[str, DiagnosticOrder] = field(default_factory=dict)
    results: dict[str, list[LabResult]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._by_patient: dict[str, list[ClinicalEvent]] | None = None
        self._times: dict[str, list[int]] = {}

    def patient_events(self, patient_id: str) -> tuple[list[ClinicalEvent], list[int]]:
        """Events of one patient in canonical order plus their epoch times."""
        if self._by_patient is None:
            by: dict[str, list[ClinicalEvent]] = {}
            for e in self.events:
                by.setdefault(e.patient_id, []).append(e)
            for pid, evs in by.items():
                evs.sort(key=_event_key)
                self._times[pid] = [to_epoch(e.effective_time) for e in evs]
            self._by_patient = by
        return self._by_patient.get(patient_id, []), self._times.get(patient_id, [])

    def result(self, order_id: str, component_code: str) -> LabResult | None:
        for r in self.results.get(order_id, ()):
            if r.component_code == component_code:
                return r
        return None

    def events_between(self, patient_id: str, since: datetime, before: datetime) -> list[ClinicalEvent]:
        evs, times = self.patient_events(patient_id)
        lo = bisect.bisect_left(times, to_epoch(since))
        hi = bisect.bisect_left(times, to_epoch(before))
        return evs[lo:hi]


def _event_key(e: ClinicalEvent) -> tuple:
    v = -math.inf if e.numeric_value is None else e.numeric_value
    return (e.effective_time, e.kind, e.code, v)


def load_warehouse(src: str | os.PathLike) -> Warehouse:
    src = Path(src)
    wh = Warehouse()
    for pid, birth, sex, race, unit in _read(src / "patients.tsv", TABLES["patients"]):
        wh.patients[pid] = PatientRecord(pid, date.fromisoformat(birth), sex, race, unit, math.nan)
    codes: dict[str, str] = {}
    stamps: dict[str, datetime] = {}
    for pid, kind, code, value, abnormal, ts in _read(src / "events.tsv", TABLES["events"]):
        code = codes.setdefault(code, code)
        when = stamps.get(ts)
        if when is None:
            when = stamps[ts] = parse_ts(ts)
        wh.events.append(ClinicalEvent(pid, kind, code, float(value) if value else None,
                                       _parse_bool(abnormal), when))
    for oid, pid, panel, ts in _read(src / "orders.tsv", TABLES["orders"]):
        if panel not in PANELS:
            raise WarehouseFormatError(f"unknown panel {panel!r} on {oid}")
        wh.orders[oid] = DiagnosticOrder(oid, pid, panel, PANELS[panel], parse_ts(ts))
    for oid, comp, value, low, high, abnormal, ts in _read(src / "results.tsv", TABLES["results"]):
        wh.results.setdefault(oid, []).append(
            LabResult(oid, comp, float(value), float(low), float(high), bool(_parse_bool(abnormal)), parse_ts(ts)))
    return wh
