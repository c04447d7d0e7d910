"""Patient histories built from either data source.

Both adapters funnel through ``make_history`` so the warehouse (training) and
the transactional API (inference) produce identical histories for identical
facts.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, timedelta
from typing import Iterable

from ..clock import age_in_years
from ..emr.client import EmrClient, PatientNotFound
from ..emr.warehouse import Warehouse

MEDICATION_WINDOW = timedelta(days=28)
LAB_WINDOW = timedelta(days=14)
LOOKBACK = max(MEDICATION_WINDOW, LAB_WINDOW)


@dataclass(frozen=True)
class Demographics:
    age_at_inference: float
    sex: str
    race: str


@dataclass(frozen=True)
class PatientHistory:
    demographics: Demographics
    conditions: tuple[tuple[str, datetime], ...]
    medications: tuple[tuple[str, datetime], ...]
    labs: tuple[tuple[str, float, datetime], ...]
    inference_time: datetime


def make_history(birth_date: date, sex: str, race: str,
                 conditions: Iterable[tuple[str, datetime]],
                 medications: Iterable[tuple[str, datetime]],
                 labs: Iterable[tuple[str, float, datetime]],
                 inference_time: datetime) -> PatientHistory:
    """Apply the shared filters and canonical ordering.

    Every event must precede ``inference_time`` strictly; medications and labs
    are additionally limited to the lookback horizon.
    """
    since = inference_time - LOOKBACK
    conds = sorted(((c, t) for c, t in conditions if t < inference_time), key=lambda r: (r[1], r[0]))
    meds = sorted(((c, t) for c, t in medications if since <= t < inference_time), key=lambda r: (r[1], r[0]))
    lab_rows = sorted(((c, float(v), t) for c, v, t in labs if since <= t < inference_time),
                      key=lambda r: (r[2], r[0], r[1]))
    demo = Demographics(age_in_years(birth_date, inference_time), sex, race)
    return PatientHistory(demo, tuple(conds), tuple(meds), tuple(lab_rows), inference_time)


def load_history_warehouse(warehouse: Warehouse, patient_id: str, inference_time: datetime) -> PatientHistory:
    patient = warehouse.patients.get(patient_id)
    if patient is None:
        raise PatientNotFound(patient_id)
    events, _ = warehouse.patient_events(patient_id)
    conditions = [(e.code, e.effective_time) for e in events
                  if e.kind == "Condition" and e.effective_time < inference_time]
    recent = warehouse.events_between(patient_id, inference_time - LOOKBACK, inference_time)
    meds = [(e.code, e.effective_time) for e in recent if e.kind == "Medication"]
    labs = [(e.code, e.numeric_value, e.effective_time) for e in recent if e.kind == "LabResult"]
    return make_history(patient.birth_date, patient.sex, patient.race, conditions, meds, labs, inference_time)


def fetch_history_transactional(emr: EmrClient, patient_id: str, inference_time: datetime) -> PatientHistory:
    """Collect a history over the EMR API.

    Raises ``PatientNotFound`` for an unknown patient and ``SourceUnavailable``
    when the EMR cannot be read; callers must not substitute a default.
    """
    since = inference_time - LOOKBACK
    demo = emr.patient(patient_id)
    conditions = emr.conditions(patient_id)
    meds = emr.medications(patient_id, since)
    labs = emr.observations(patient_id, since)
    return make_history(demo["birth_date"], demo["sex"], demo["race"], conditions, meds, labs, inference_time)
