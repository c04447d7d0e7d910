"""Append-only inference store.

One JSON record per line. ``packet`` records are written once and never
rewritten; labels arrive later as ``label_update`` records that reads fold
over the base packets. A final line without its newline (or that does not
parse) is a torn write: it is reported, ignored on read and cut off before the
next append. A bad line anywhere else is corruption and fails loudly.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Iterator, Mapping

from ..clock import format_ts, parse_ts

log = logging.getLogger(__name__)

PACKET = "packet"
LABEL_UPDATE = "label_update"


class StoreCorruptError(RuntimeError):
    def __init__(self, path: Path, offset: int, reason: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: corrupt record at byte offset {offset}: {reason}")


@dataclass(frozen=True)
class InferencePacket:
    packet_id: str
    model_id: str
    patient_id: str
    order_id: str | None
    inference_time: datetime
    features: tuple[tuple[int, int], ...]
    score: float
    arm: str
    routed: tuple[str, ...]
    oov_count: int = 0
    vocab_fingerprint: str = ""
    mode: str = "Silent"
    arm_generator: str = ""
    arm_seed: int = 0
    arm_index: int = -1
    panel_code: str = ""
    component_code: str = ""
    label: bool | None = None
    label_time: datetime | None = None
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def feature_dict(self) -> dict[int, int]:
        return dict(self.features)

    def to_record(self) -> dict[str, Any]:
        d = asdict(self)
        d["inference_time"] = format_ts(self.inference_time)
        d["features"] = [list(p) for p in self.features]
        d["routed"] = list(self.routed)
        for k in ("label", "label_time", "attributes"):
            d.pop(k)
        return d

    @classmethod
    def from_record(cls, d: Mapping[str, Any]) -> InferencePacket:
        d = dict(d)
        d["inference_time"] = parse_ts(d["inference_time"])
        d["features"] = tuple((int(i), int(c)) for i, c in d["features"])
        d["routed"] = tuple(d["routed"])
        return cls(**d)


@dataclass(frozen=True)
class LabelUpdate:
    packet_id: str
    label: bool
    label_time: datetime
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return {"packet_id": self.packet_id, "label": self.label, "label_time": format_ts(self.label_time),
                "attributes": dict(self.attributes)}


class PacketStore:
    """Single-writer JSONL store; concurrent appends serialize on an internal lock."""

    def __init__(self, path: str | os.PathLike, fsync: bool = False):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self.torn_records = 0
        with self._lock:
            self._repair_tail()
        self._seq = sum(1 for kind, _ in self._records() if kind == PACKET)

    def _scan(self) -> tuple[list[tuple[str, dict[str, Any]]], int | None]:
        """Parse all records; returns (records, offset of a torn tail or None)."""
        data = self.path.read_bytes()
        records: list[tuple[str, dict[str, Any]]] = []
        offset = 0
        while offset < len(data):
            nl = data.find(b"\n", offset)
            last = nl == -1 or nl == len(data) - 1
            line = data[offset:] if nl == -1 else data[offset:nl]
            try:
                rec = json.loads(line)
                kind = rec["kind"]
                if kind not in (PACKET, LABEL_UPDATE):
                    raise ValueError(f"unknown record kind {kind!r}")
                if nl == -1:
                    raise ValueError("missing record terminator")
            except (ValueError, KeyError, TypeError) as exc:
                if last:
                    return records, offset
                raise StoreCorruptError(self.path, offset, str(exc)) from None
            records.append((kind, rec["data"]))
            offset = nl + 1
        return records, None

    def _repair_tail(self) -> None:
        _, torn = self._scan()
        if torn is not None:
            size = self.path.stat().st_size
            log.warning("%s: dropping torn final record at byte offset %d (%d bytes)", self.path, torn, size - torn)
            self.torn_records += 1
            with open(self.path, "r+b") as fh:
                fh.truncate(torn)

    def _records(self) -> Iterator[tuple[str, dict[str, Any]]]:
        records, torn = self._scan()
        if torn is not None:
            log.warning("%s: ignoring torn final record at byte offset %d", self.path, torn)
        return iter(records)

    def _append(self, kind: str, data: dict[str, Any]) -> None:
        line = json.dumps({"kind": kind, "data": data}, sort_keys=True, separators=(",", ":")) + "\n"
        with open(self.path, "ab") as fh:
            fh.write(line.encode("utf-8"))
            if self.fsync:
                fh.flush()
                os.fsync(fh.fileno())

    def new_packet_id(self, model_id: str) -> str:
        with self._lock:
            self._seq += 1
            return f"{model_id}-{self._seq:08d}"

    def append_packet(self, packet: InferencePacket) -> None:
        if packet.label is not None:
            raise ValueError("packets are stored unlabeled; use append_label")
        with self._lock:
            self._append(PACKET, packet.to_record())

    def append_label(self, update: LabelUpdate) -> None:
        with self._lock:
            self._append(LABEL_UPDATE, update.to_record())

    def read_packets(self, model_id: str | None = None, since: datetime | None = None,
                     until: datetime | None = None) -> list[InferencePacket]:
        """Packets in append order with label updates applied; time filter is [since, until)."""
        packets: dict[str, InferencePacket] = {}
        for kind, data in self._records():
            if kind == PACKET:
                p = InferencePacket.from_record(data)
                packets[p.packet_id] = p
            else:
                pid = data["packet_id"]
                if pid not in packets:
                    log.warning("label update for unknown packet %s", pid)
                    continue
                packets[pid] = replace(packets[pid], label=bool(data["label"]),
                                       label_time=parse_ts(data["label_time"]),
                                       attributes=dict(data.get("attributes", {})))
        out = []
        for p in packets.values():
            if model_id is not None and p.model_id != model_id:
                continue
            if since is not None and p.inference_time < since:
                continue
            if until is not None and p.inference_time >= until:
                continue
            out.append(p)
        return out

    def record_counts(self) -> dict[str, int]:
        counts = {PACKET: 0, LABEL_UPDATE: 0}
        for kind, _ in self._records():
            counts[kind] += 1
        return counts


def append_packet(store: PacketStore, packet: InferencePacket) -> None:
    store.append_packet(packet)


def read_packets(store: PacketStore, model_id: str | None = None, since: datetime | None = None,
                 until: datetime | None = None) -> list[InferencePacket]:
    return store.read_packets(model_id, since, until)
