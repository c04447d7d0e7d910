"""Label extraction: pair stored inferences with outcomes once they can exist."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Any, Mapping, Sequence

from ..clock import age_in_years
from ..emr.client import EmrClient, EmrError
from ..serve.store import InferencePacket, LabelUpdate, PacketStore

log = logging.getLogger(__name__)

AGE_SPLIT = 40.0


@dataclass(frozen=True)
class LabeledSample:
    packet_id: str
    score: float
    label: bool
    inference_time: datetime
    attributes: Mapping[str, Any] = field(default_factory=dict)
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.weight > 0:
            raise ValueError("sample weight must be positive")


def subgroup_attributes(demographics: Mapping[str, Any], at: datetime) -> dict[str, Any]:
    """``sex``, ``race`` and ``age_over_40`` (strictly older than 40 at ``at``)."""
    return {"sex": demographics["sex"], "race": demographics["race"],
            "age_over_40": age_in_years(demographics["birth_date"], at) > AGE_SPLIT}


class LabResultExtractor:
    """Label = the abnormal flag of the ordered component's result."""

    def __init__(self, component_code: str | None = None):
        self.component_code = component_code

    def applies(self, packet: InferencePacket) -> bool:
        return packet.order_id is not None

    def extract(self, emr: EmrClient, packet: InferencePacket) -> tuple[bool, datetime] | None:
        comp = self.component_code or packet.component_code
        res = emr.order_result(packet.order_id, comp)
        if res is None:
            return None
        return bool(res["abnormal"]), res["result_time"]


@dataclass
class ExtractionResult:
    labeled: int = 0
    pending: int = 0
    immature: int = 0
    errors: int = 0
    not_applicable: int = 0

    def __int__(self) -> int:
        return self.labeled


def extract_labels(store: PacketStore, emr: EmrClient, maturation: timedelta, now: datetime,
                   extractors: Mapping[str, LabResultExtractor] | None = None,
                   model_id: str | None = None) -> ExtractionResult:
    """Append one label update for every matured, still-unlabeled packet whose outcome exists.

    Packets already labeled are skipped, so repeated runs append nothing new.
    EMR failures leave the packet unlabeled and are counted; nothing is guessed.
    """
    out = ExtractionResult()
    default = LabResultExtractor()
    demographics: dict[str, Mapping[str, Any]] = {}
    for p in store.read_packets(model_id):
        if p.label is not None:
            continue
        ext = (extractors or {}).get(p.model_id, default)
        if not ext.applies(p):
            out.not_applicable += 1
            continue
        if p.inference_time + maturation > now:
            out.immature += 1
            continue
        try:
            found = ext.extract(emr, p)
            if found is None:
                out.pending += 1
                continue
            if p.patient_id not in demographics:
                demographics[p.patient_id] = emr.patient(p.patient_id)
        except EmrError as exc:
            out.errors += 1
            log.warning("label extraction for %s failed: %s", p.packet_id, exc)
            continue
        label, when = found
        store.append_label(LabelUpdate(p.packet_id, label, when,
                                       subgroup_attributes(demographics[p.patient_id], p.inference_time)))
        out.labeled += 1
    log.info("label extraction: %s", out)
    return out


def labeled_samples(packets: Sequence[InferencePacket]) -> list[LabeledSample]:
    return [LabeledSample(p.packet_id, p.score, bool(p.label), p.inference_time, dict(p.attributes))
            for p in packets if p.label is not None]
