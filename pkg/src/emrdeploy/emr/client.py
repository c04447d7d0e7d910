"""Client for the EMR's transactional API.

Maps the FHIR-flavoured wire format back to plain Python values. Any
transport failure or server error surfaces as ``SourceUnavailable`` so callers
can fail closed.
"""

from __future__ import annotations

from datetime import date, datetime
from typing import Any

from ..clock import format_ts, parse_ts
from ..web import Response, TransportError

SEX_FROM_GENDER = {"female": "Female", "male": "Male", "unknown": "Unknown"}


class EmrError(Exception):
    pass


class PatientNotFound(EmrError):
    pass


class SourceUnavailable(EmrError):
    pass


def _code(resource: dict[str, Any], key: str = "code") -> str:
    return resource[key]["coding"][0]["code"]


class EmrClient:
    def __init__(self, base_url: str, transport: Any):
        self.base_url = base_url.rstrip("/")
        self.transport = transport

    def _call(self, method: str, path: str, params: dict[str, str] | None = None,
              body: Any = None, not_found: type[Exception] = PatientNotFound) -> Response:
        try:
            resp = self.transport.request(method, self.base_url + path, params=params, json_body=body)
        except TransportError as exc:
            raise SourceUnavailable(f"{method} {path}: {exc}") from exc
        if resp.status == 404:
            raise not_found(f"{method} {path}: {resp.text}")
        if not resp.ok:
            raise SourceUnavailable(f"{method} {path}: HTTP {resp.status} {resp.text[:200]}")
        return resp

    def _bundle(self, path: str, params: dict[str, str]) -> list[dict[str, Any]]:
        try:
            return [e["resource"] for e in self._call("GET", path, params).json()["entry"]]
        except (KeyError, ValueError) as exc:
            raise SourceUnavailable(f"GET {path}: malformed bundle ({exc})") from exc

    def patient(self, patient_id: str) -> dict[str, Any]:
        r = self._call("GET", f"/Patient/{patient_id}").json()
        ext = {x["url"]: x["valueCode"] for x in r.get("extension", [])}
        return {"patient_id": r["id"], "birth_date": date.fromisoformat(r["birthDate"]),
                "sex": SEX_FROM_GENDER[r["gender"]], "race": ext["race"], "unit_id": ext["unit"]}

    def conditions(self, patient_id: str) -> list[tuple[str, datetime]]:
        return [(_code(r), parse_ts(r["recordedDate"]))
                for r in self._bundle("/Condition", {"patient": patient_id})]

    def medications(self, patient_id: str, since: datetime) -> list[tuple[str, datetime]]:
        rs = self._bundle("/MedicationRequest", {"patient": patient_id, "since": format_ts(since)})
        return [(_code(r, "medicationCodeableConcept"), parse_ts(r["authoredOn"])) for r in rs]

    def observations(self, patient_id: str, since: datetime) -> list[tuple[str, float, datetime]]:
        rs = self._bundle("/Observation", {"patient": patient_id, "since": format_ts(since)})
        return [(_code(r), float(r["valueQuantity"]["value"]), parse_ts(r["effectiveDateTime"])) for r in rs]

    def order_result(self, order_id: str, component_code: str) -> dict[str, Any] | None:
        rs = self._bundle("/Observation", {"order": order_id, "component": component_code})
        if not rs:
            return None
        r = rs[0]
        return {"order_id": order_id, "component_code": _code(r), "value": r["valueQuantity"]["value"],
                "abnormal": r["interpretation"] == "A", "result_time": parse_ts(r["issued"])}

    def unit_roster(self, unit_id: str) -> list[str]:
        return list(self._call("GET", f"/Unit/{unit_id}/patients", not_found=SourceUnavailable).json()["patients"])

    def subscribe(self, panel_code: str, callback_url: str) -> str:
        return self._call("POST", "/Subscription", body={"panel_code": panel_code,
                                                         "callback_url": callback_url}).json()["id"]

    def unsubscribe(self, subscription_id: str) -> None:
        self._call("DELETE", f"/Subscription/{subscription_id}", not_found=SourceUnavailable)

    def sign_order(self, patient_id: str, panel_code: str) -> dict[str, Any]:
        return self._call("POST", "/Order", body={"patient_id": patient_id, "panel_code": panel_code}).json()

    def writeback(self, target: str, payload: dict[str, Any]) -> dict[str, Any]:
        """``target`` is the URL segment: score, flowsheet or inbasket."""
        return self._call("POST", f"/writeback/{target}", body=payload).json()

    def writeback_log(self, target: str) -> list[dict[str, Any]]:
        return self._call("GET", f"/writeback/{target}").json()["entries"]
