"""Deployment runtime: triggers, the fetch/featurize/infer/route pipeline and packets.

Each registered model gets ``POST /models/{model_id}/infer``. Event triggers
subscribe that endpoint to the EMR's order-signed webhook; timer triggers are
fired by whoever drives the clock through ``tick``. Every inference either
completes and appends exactly one packet, or appends nothing and bumps an
error counter. Data-fetch failures never produce a default score.
"""

from __future__ import annotations

import logging
import threading
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Mapping

from ..clock import format_ts, parse_ts
from ..emr.client import EmrClient, PatientNotFound, SourceUnavailable
from ..emr.catalog import PANELS
from ..features.history import fetch_history_transactional
from ..features.vocab import featurize
from ..model.bundle import ModelBundle, VocabularyMismatch
from ..web import XML_TYPE, App, HTTPError, Request, Response, json_response
from .arms import DISPLAY, ArmAssigner
from .cron import CronSchedule, parse_cron
from .store import InferencePacket, PacketStore

log = logging.getLogger(__name__)

SILENT, LOUD = "Silent", "Loud"
ACTIVE, PAUSED = "Active", "Paused"
ALERT = "Alert"
ROUTE_SEGMENTS = {"ScoreColumn": "score", "Flowsheet": "flowsheet", "Inbasket": "inbasket"}
ROUTES = (*ROUTE_SEGMENTS, ALERT)


class DeploymentConflict(RuntimeError):
    pass


class RegistrationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class EventTrigger:
    panel_code: str

    def __post_init__(self) -> None:
        if self.panel_code not in PANELS:
            raise ValueError(f"unknown panel {self.panel_code!r}")


@dataclass(frozen=True)
class TimerTrigger:
    cron_expr: str
    unit_id: str

    def __post_init__(self) -> None:
        parse_cron(self.cron_expr)  # syntax errors surface at configuration time


@dataclass(frozen=True)
class TriggerConfig:
    trigger: EventTrigger | TimerTrigger
    mode: str = SILENT
    routes: tuple[str, ...] = ()
    randomization_p: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in (SILENT, LOUD):
            raise ValueError(f"mode must be {SILENT} or {LOUD}, got {self.mode!r}")
        bad = [r for r in self.routes if r not in ROUTES]
        if bad:
            raise ValueError(f"unknown routes {bad}")
        if not 0.0 <= self.randomization_p <= 1.0:
            raise ValueError("randomization_p must be in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        if isinstance(self.trigger, EventTrigger):
            trig = {"type": "event", "panel_code": self.trigger.panel_code}
        else:
            trig = {"type": "timer", "cron_expr": self.trigger.cron_expr, "unit_id": self.trigger.unit_id}
        return {"trigger": trig, "mode": self.mode, "routes": list(self.routes),
                "randomization_p": self.randomization_p, "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TriggerConfig:
        t = d["trigger"]
        if t["type"] == "event":
            trig: EventTrigger | TimerTrigger = EventTrigger(t["panel_code"])
        elif t["type"] == "timer":
            trig = TimerTrigger(t["cron_expr"], t["unit_id"])
        else:
            raise ValueError(f"unknown trigger type {t['type']!r}")
        return cls(trig, d.get("mode", SILENT), tuple(d.get("routes", ())),
                   float(d.get("randomization_p", 0.0)), int(d.get("rng_seed", 0)))


@dataclass
class Deployment:
    model_id: str
    bundle: ModelBundle
    trigger_config: TriggerConfig
    endpoint: str
    subscription_id: str | None = None
    schedule: CronSchedule | None = None
    status: str = ACTIVE
    arms: ArmAssigner | None = None
    counters: Counter = field(default_factory=Counter)
    _gate: threading.Condition = field(default_factory=threading.Condition, repr=False)
    _in_flight: int = 0

    def _enter(self) -> bool:
        with self._gate:
            if self.status != ACTIVE:
                return False
            self._in_flight += 1
            return True

    def _exit(self) -> None:
        with self._gate:
            self._in_flight -= 1
            self._gate.notify_all()

    def pause(self) -> None:
        """Stop new inferences; returns once in-flight pipelines have finished."""
        with self._gate:
            self.status = PAUSED
            self._gate.wait_for(lambda: self._in_flight == 0)

    def resume(self) -> None:
        with self._gate:
            self.status = ACTIVE


def alert_document(model_id: str, score: float, threshold: float, message: str) -> bytes:
    root = ET.Element("alert")
    for tag, text in (("model_id", model_id), ("score", f"{score:.6f}"),
                      ("threshold", f"{threshold:.6f}"), ("message", message)):
        ET.SubElement(root, tag).text = text
    return ET.tostring(root, encoding="utf-8", xml_declaration=False)


def parse_alert(body: bytes | str) -> dict[str, str]:
    root = ET.fromstring(body)
    if root.tag != "alert":
        raise ValueError(f"not an alert document: <{root.tag}>")
    return {child.tag: child.text or "" for child in root}


@dataclass
class PipelineResult:
    packet: InferencePacket
    alert: bytes | None = None


class ServeEngine:
    def __init__(self, emr: EmrClient, store: PacketStore, clock: Any, base_url: str = "http://serve.local"):
        self.emr = emr
        self.store = store
        self.clock = clock
        self.base_url = base_url.rstrip("/")
        self.deployments: dict[str, Deployment] = {}
        self._lock = threading.Lock()
        self.app = self._build_app()

    # ------------------------------------------------------------ registration
    def register_deployment(self, bundle: ModelBundle, config: TriggerConfig) -> Deployment:
        model_id = bundle.model_id
        with self._lock:
            if model_id in self.deployments:
                raise DeploymentConflict(f"model {model_id} is already deployed")
            trig = config.trigger
            if isinstance(trig, EventTrigger) and trig.panel_code != bundle.panel_code:
                raise ValueError(f"bundle predicts {bundle.panel_code}, trigger listens for {trig.panel_code}")
            endpoint = f"{self.base_url}/models/{model_id}/infer"
            seen = [p.arm_index for p in self.store.read_packets(model_id)]
            arms = ArmAssigner(f"arms:{model_id}", config.rng_seed, config.randomization_p,
                               next_index=max(seen, default=-1) + 1)
            dep = Deployment(model_id, bundle, config, endpoint, arms=arms)
            try:
                if isinstance(trig, EventTrigger):
                    dep.subscription_id = self.emr.subscribe(trig.panel_code, endpoint)
                else:
                    self.emr.unit_roster(trig.unit_id)
                    dep.schedule = parse_cron(trig.cron_expr)
            except SourceUnavailable as exc:
                raise RegistrationFailed(f"cannot register {model_id}: EMR unreachable ({exc})") from exc
            self.deployments[model_id] = dep
        log.info("registered %s (%s, %s)", model_id, type(trig).__name__, config.mode)
        return dep

    def unregister(self, model_id: str) -> None:
        with self._lock:
            dep = self.deployments.pop(model_id)
        dep.pause()
        if dep.subscription_id:
            self.emr.unsubscribe(dep.subscription_id)

    def deployment(self, model_id: str) -> Deployment:
        dep = self.deployments.get(model_id)
        if dep is None:
            raise KeyError(model_id)
        return dep

    # ---------------------------------------------------------------- pipeline
    def run_pipeline(self, dep: Deployment, patient_id: str, order_id: str | None,
                     inference_time: datetime) -> PipelineResult:
        """fetch -> featurize -> infer -> randomize -> route -> append; raises before any side effect."""
        bundle = dep.bundle
        history = fetch_history_transactional(self.emr, patient_id, inference_time)
        vec = featurize(history, bundle.vocabulary)
        score = bundle.predict_proba(vec)
        draw = dep.arms.draw()
        packet_id = self.store.new_packet_id(dep.model_id)
        cfg = dep.trigger_config
        routed: list[str] = []
        alert = None
        if cfg.mode == LOUD and draw.arm == DISPLAY:
            routed, alert = self.route_output(dep, packet_id, patient_id, order_id, inference_time, score)
        packet = InferencePacket(
            packet_id=packet_id, model_id=dep.model_id, patient_id=patient_id, order_id=order_id,
            inference_time=inference_time, features=tuple(vec.entries.items()), score=score,
            arm=draw.arm, routed=tuple(routed), oov_count=vec.oov_count,
            vocab_fingerprint=vec.vocab_fingerprint, mode=cfg.mode, arm_generator=draw.generator,
            arm_seed=draw.seed, arm_index=draw.index, panel_code=bundle.panel_code,
            component_code=bundle.component_code)
        self.store.append_packet(packet)
        dep.counters["packets"] += 1
        return PipelineResult(packet, alert)

    def route_output(self, dep: Deployment, packet_id: str, patient_id: str, order_id: str | None,
                     inference_time: datetime, score: float) -> tuple[list[str], bytes | None]:
        """Perform every configured route; a failed write-back is recorded and the rest still run."""
        bundle = dep.bundle
        routed: list[str] = []
        alert = None
        flagged = score >= bundle.decision_threshold
        for route in dep.trigger_config.routes:
            if route == ALERT:
                message = (f"Elevated risk of abnormal {bundle.component_code}" if flagged
                           else f"Abnormal {bundle.component_code} unlikely")
                alert = alert_document(dep.model_id, score, bundle.decision_threshold, message)
                routed.append(ALERT)
                continue
            payload = {"patient_id": patient_id, "order_id": order_id, "model_id": dep.model_id,
                       "packet_id": packet_id, "score": score, "threshold": bundle.decision_threshold,
                       "flagged": flagged, "inference_time": format_ts(inference_time)}
            try:
                self.emr.writeback(ROUTE_SEGMENTS[route], payload)
            except Exception as exc:  # noqa: BLE001 - one failed route must not block the others
                log.warning("%s: %s write-back failed for %s: %s", dep.model_id, route, packet_id, exc)
                dep.counters["route_failures"] += 1
                routed.append(f"{route}:failed")
            else:
                routed.append(route)
        return routed, alert

    # ------------------------------------------------------------------ events
    def handle_event(self, model_id: str, payload: Mapping[str, Any]) -> Response:
        dep = self.deployments.get(model_id)
        if dep is None:
            return json_response({"error": f"no deployment for {model_id}"}, 404)
        try:
            pid = str(payload["patient_id"])
            oid = str(payload["order_id"])
            panel = str(payload["panel_code"])
            when = parse_ts(str(payload["order_time"]))
        except (KeyError, TypeError, ValueError) as exc:
            return json_response({"error": f"bad trigger payload: {exc}"}, 400)
        if not dep._enter():
            return json_response({"error": f"{model_id} is paused"}, 409)
        try:
            if isinstance(dep.trigger_config.trigger, EventTrigger) and panel != dep.bundle.panel_code:
                return json_response({"error": f"{model_id} does not score {panel} orders"}, 422)
            try:
                result = self.run_pipeline(dep, pid, oid, when)
            except PatientNotFound as exc:
                dep.counters["errors"] += 1
                dep.counters["patient_not_found"] += 1
                return json_response({"error": f"patient not found: {exc}"}, 404)
            except SourceUnavailable as exc:
                dep.counters["errors"] += 1
                dep.counters["source_unavailable"] += 1
                log.warning("%s: feature source unavailable for order %s: %s", model_id, oid, exc)
                return json_response({"error": f"feature source unavailable: {exc}"}, 503)
            except VocabularyMismatch as exc:
                dep.counters["errors"] += 1
                dep.counters["vocabulary_mismatch"] += 1
                log.error("%s: %s", model_id, exc)
                return json_response({"error": str(exc)}, 500)
        finally:
            dep._exit()
        p = result.packet
        if result.alert is not None:
            return Response(200, result.alert, XML_TYPE)
        ack: dict[str, Any] = {"packet_id": p.packet_id, "arm": p.arm}
        if p.mode == LOUD:
            ack["score"] = p.score
        return json_response(ack)

    # ------------------------------------------------------------------ timers
    def run_timer_tick(self, dep: Deployment, now: datetime) -> list[InferencePacket]:
        trig = dep.trigger_config.trigger
        if not isinstance(trig, TimerTrigger) or dep.schedule is None or not dep.schedule.matches(now):
            return []
        if not dep._enter():
            return []
        try:
            try:
                roster = self.emr.unit_roster(trig.unit_id)
            except Exception as exc:  # noqa: BLE001 - whole tick skipped and counted
                dep.counters["errors"] += 1
                dep.counters["roster_failures"] += 1
                log.warning("%s: roster fetch for %s failed: %s", dep.model_id, trig.unit_id, exc)
                return []
            packets = []
            for pid in roster:
                try:
                    packets.append(self.run_pipeline(dep, pid, None, now).packet)
                except (PatientNotFound, SourceUnavailable, VocabularyMismatch) as exc:
                    dep.counters["errors"] += 1
                    log.warning("%s: skipped %s at %s: %s", dep.model_id, pid, format_ts(now), exc)
            return packets
        finally:
            dep._exit()

    def tick(self, now: datetime) -> list[InferencePacket]:
        """Fire every timer deployment whose schedule matches ``now``."""
        out: list[InferencePacket] = []
        for dep in list(self.deployments.values()):
            if dep.schedule is not None:
                out.extend(self.run_timer_tick(dep, now))
        return out

    def next_timer_fire(self, after: datetime) -> datetime | None:
        fires = [d.schedule.next_after(after) for d in self.deployments.values()
                 if d.schedule is not None and d.status == ACTIVE]
        return min(fires, default=None)

    # --------------------------------------------------------------------- app
    def _build_app(self) -> App:
        app = App("serve")

        @app.route("POST", "/models/{model_id}/infer")
        def infer(req: Request) -> Response:
            body = req.json()
            if not isinstance(body, dict):
                raise HTTPError(400, "payload must be an object")
            return self.handle_event(req.params["model_id"], body)

        @app.route("GET", "/models")
        def list_models(req: Request) -> Response:
            return json_response({"models": [
                {"model_id": d.model_id, "status": d.status, "endpoint": d.endpoint,
                 "trigger": d.trigger_config.to_dict(), "counters": dict(d.counters)}
                for d in self.deployments.values()]})

        @app.route("POST", "/models/{model_id}/pause")
        def pause(req: Request) -> Response:
            try:
                self.deployment(req.params["model_id"]).pause()
            except KeyError:
                raise HTTPError(404, "unknown model") from None
            return json_response({"model_id": req.params["model_id"], "status": PAUSED})

        @app.route("POST", "/models/{model_id}/resume")
        def resume(req: Request) -> Response:
            try:
                self.deployment(req.params["model_id"]).resume()
            except KeyError:
                raise HTTPError(404, "unknown model") from None
            return json_response({"model_id": req.params["model_id"], "status": ACTIVE})

        return app


def register_deployment(engine: ServeEngine, bundle: ModelBundle, config: TriggerConfig) -> Deployment:
    return engine.register_deployment(bundle, config)
