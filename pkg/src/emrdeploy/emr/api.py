"""FHIR-flavoured transactional API of the simulated EMR.

Reads never return a fact whose effective or result time lies after the
injected clock's ``now``.
"""

from __future__ import annotations

from datetime import datetime
from typing import Any

from ..clock import format_ts, parse_ts
from ..web import App, HTTPError, Request, Response, json_response
from .world import WRITEBACK_TARGETS, ClinicalEvent, LabResult, UnknownOrder, UnknownPatient, World

GENDER_CODES = {"Female": "female", "Male": "male", "Unknown": "unknown"}


def _bundle(resources: list[dict[str, Any]]) -> dict[str, Any]:
    return {"resourceType": "Bundle", "type": "searchset", "total": len(resources),
            "entry": [{"resource": r} for r in resources]}


def _coding(system: str, code: str) -> dict[str, Any]:
    return {"coding": [{"system": system, "code": code}]}


def _subject(pid: str) -> dict[str, str]:
    return {"reference": f"Patient/{pid}"}


def condition_resource(e: ClinicalEvent) -> dict[str, Any]:
    return {"resourceType": "Condition", "subject": _subject(e.patient_id),
            "code": _coding("http://hl7.org/fhir/sid/icd-10-cm", e.code),
            "recordedDate": format_ts(e.effective_time)}


def medication_resource(e: ClinicalEvent) -> dict[str, Any]:
    return {"resourceType": "MedicationRequest", "subject": _subject(e.patient_id),
            "medicationCodeableConcept": _coding("http://www.nlm.nih.gov/research/umls/rxnorm", e.code),
            "authoredOn": format_ts(e.effective_time)}


def lab_resource(e: ClinicalEvent) -> dict[str, Any]:
    return {"resourceType": "Observation", "status": "final", "subject": _subject(e.patient_id),
            "code": _coding("urn:emrdeploy:lab", e.code),
            "valueQuantity": {"value": e.numeric_value},
            "interpretation": "A" if e.abnormal else "N",
            "effectiveDateTime": format_ts(e.effective_time)}


def result_resource(r: LabResult, patient_id: str) -> dict[str, Any]:
    return {"resourceType": "Observation", "status": "final", "subject": _subject(patient_id),
            "basedOn": [{"reference": f"ServiceRequest/{r.order_id}"}],
            "code": _coding("urn:emrdeploy:lab", r.component_code),
            "valueQuantity": {"value": r.value},
            "referenceRange": [{"low": r.ref_low, "high": r.ref_high}],
            "interpretation": "A" if r.abnormal else "N",
            "issued": format_ts(r.result_time)}


def patient_resource(world: World, pid: str) -> dict[str, Any]:
    p = world.patient(pid)
    return {"resourceType": "Patient", "id": p.patient_id, "birthDate": p.birth_date.isoformat(),
            "gender": GENDER_CODES[p.sex],
            "extension": [{"url": "race", "valueCode": p.race}, {"url": "unit", "valueCode": p.unit_id}]}


def build_emr_app(world: World, clock: Any) -> App:
    app = App("emr")

    def need(req: Request, name: str) -> str:
        value = req.query.get(name)
        if not value:
            raise HTTPError(400, f"missing query parameter {name!r}")
        return value

    def since_of(req: Request) -> datetime | None:
        raw = req.query.get("since")
        if raw is None:
            return None
        try:
            return parse_ts(raw)
        except ValueError:
            raise HTTPError(400, f"malformed since {raw!r}") from None

    def patient_events(req: Request, kind: str, render) -> Response:
        pid = need(req, "patient")
        since = since_of(req)
        try:
            evs = world.events(pid, kind=kind, since=since, until=clock.now())
        except UnknownPatient:
            raise HTTPError(404, f"unknown patient {pid}") from None
        return json_response(_bundle([render(e) for e in evs]))

    @app.route("GET", "/Patient/{pid}")
    def get_patient(req: Request) -> Response:
        try:
            return json_response(patient_resource(world, req.params["pid"]))
        except UnknownPatient:
            raise HTTPError(404, f"unknown patient {req.params['pid']}") from None

    @app.route("GET", "/Condition")
    def get_conditions(req: Request) -> Response:
        return patient_events(req, "Condition", condition_resource)

    @app.route("GET", "/MedicationRequest")
    def get_medications(req: Request) -> Response:
        return patient_events(req, "Medication", medication_resource)

    @app.route("GET", "/Observation")
    def get_observations(req: Request) -> Response:
        if "order" in req.query:
            oid = need(req, "order")
            comp = req.query.get("component")
            try:
                results = world.visible_results(oid, clock.now())
            except UnknownOrder:
                raise HTTPError(404, f"unknown order {oid}") from None
            pid = world.orders[oid].patient_id
            return json_response(_bundle([result_resource(r, pid) for r in results
                                          if comp is None or r.component_code == comp]))
        return patient_events(req, "LabResult", lab_resource)

    @app.route("GET", "/Unit/{unit_id}/patients")
    def get_roster(req: Request) -> Response:
        unit = req.params["unit_id"]
        try:
            roster = world.unit_roster(unit)
        except KeyError:
            raise HTTPError(404, f"unknown unit {unit}") from None
        return json_response({"unit_id": unit, "patients": roster})

    @app.route("POST", "/Subscription")
    def post_subscription(req: Request) -> Response:
        body = req.json()
        try:
            sub = world.add_subscription(str(body["panel_code"]), str(body["callback_url"]))
        except (KeyError, ValueError) as exc:
            raise HTTPError(400, f"bad subscription: {exc}") from None
        return json_response({"id": sub.subscription_id, "panel_code": sub.panel_code,
                              "callback_url": sub.callback_url}, 201)

    @app.route("DELETE", "/Subscription/{sid}")
    def delete_subscription(req: Request) -> Response:
        if not world.remove_subscription(req.params["sid"]):
            raise HTTPError(404, "unknown subscription")
        return json_response({"deleted": req.params["sid"]})

    @app.route("POST", "/Order")
    def post_order(req: Request) -> Response:
        body = req.json()
        try:
            order = world.sign_order(str(body["patient_id"]), str(body["panel_code"]), clock.now())
        except UnknownPatient:
            raise HTTPError(404, "unknown patient") from None
        except (KeyError, ValueError) as exc:
            raise HTTPError(400, f"bad order: {exc}") from None
        return json_response({"order_id": order.order_id, "patient_id": order.patient_id,
                              "panel_code": order.panel_code, "order_time": format_ts(order.order_time)}, 201)

    @app.route("POST", "/writeback/{target}")
    def post_writeback(req: Request) -> Response:
        target = WRITEBACK_TARGETS.get(req.params["target"])
        if target is None:
            raise HTTPError(400, f"unknown write-back target {req.params['target']!r}")
        body = req.json()
        if not isinstance(body, dict):
            raise HTTPError(400, "payload must be an object")
        try:
            entry = world.writeback(target, body, clock.now())
        except UnknownPatient:
            raise HTTPError(404, f"unknown patient {body.get('patient_id')}") from None
        return json_response({"target": target, "sequence": entry["sequence"],
                              "received_time": entry["received_time"]}, 201)

    @app.route("GET", "/writeback/{target}")
    def get_writeback(req: Request) -> Response:
        target = WRITEBACK_TARGETS.get(req.params["target"])
        if target is None:
            raise HTTPError(400, f"unknown write-back target {req.params['target']!r}")
        with world._lock:
            entries = list(world.writeback_logs[target])
        pid = req.query.get("patient")
        if pid:
            entries = [e for e in entries if e.get("patient_id") == pid]
        return json_response({"target": target, "entries": entries})

    @app.route("GET", "/alerts")
    def get_alerts(req: Request) -> Response:
        with world._lock:
            return json_response({"alerts": list(world.alert_log)})

    return app
