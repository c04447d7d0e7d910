"""Virtual-time driver for prospective trials.

Wires the simulated EMR and the serving engine together through an
in-process transport, scripts order arrivals as seeded Poisson processes and
steps a virtual clock through order signatures, timer-trigger firings and
scheduled label extraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .clock import VirtualClock, format_ts, from_epoch, to_epoch
from .emr.api import build_emr_app
from .emr.client import EmrClient
from .emr.world import World
from .monitor.labels import extract_labels
from .serve.cron import parse_cron
from .serve.engine import ServeEngine
from .serve.store import PacketStore
from .web import HttpTransport, LocalTransport, RunningServer, serve_app

log = logging.getLogger(__name__)

EMR_URL = "http://emr.local"
SERVE_URL = "http://serve.local"


@dataclass
class Stack:
    world: World
    clock: Any
    transport: Any
    emr: EmrClient
    store: PacketStore
    engine: ServeEngine
    servers: list[RunningServer] = field(default_factory=list)

    def close(self) -> None:
        for server in self.servers:
            server.shutdown()
        self.servers.clear()
        if isinstance(self.transport, HttpTransport):
            self.transport.close()


def build_stack(world: World, store_path: str | Path, start: datetime) -> Stack:
    clock = VirtualClock(start)
    transport = LocalTransport()
    transport.mount(EMR_URL, build_emr_app(world, clock))
    world.transport = transport
    emr = EmrClient(EMR_URL, transport)
    store = PacketStore(store_path)
    engine = ServeEngine(emr, store, clock, SERVE_URL)
    transport.mount(SERVE_URL, engine.app)
    return Stack(world, clock, transport, emr, store, engine)


def build_http_stack(world: World, store_path: str | Path, clock: Any, host: str = "127.0.0.1",
                     emr_port: int = 0, serve_port: int = 0) -> Stack:
    """The same wiring over real sockets: the EMR and the engine each get an HTTP server."""
    transport = HttpTransport()
    emr_server = serve_app(build_emr_app(world, clock), host, emr_port)
    world.transport = transport
    emr = EmrClient(emr_server.url, transport)
    store = PacketStore(store_path)
    engine = ServeEngine(emr, store, clock)
    serve_server = serve_app(engine.app, host, serve_port)
    engine.base_url = serve_server.url
    return Stack(world, clock, transport, emr, store, engine, [emr_server, serve_server])


@dataclass(frozen=True)
class Arrival:
    time: datetime
    panel_code: str
    patient_id: str


def order_arrivals(world: World, rates: Mapping[str, float], start: datetime, end: datetime,
                   seed: int) -> list[Arrival]:
    """Homogeneous Poisson arrivals per panel (``rates`` in orders per day), whole seconds."""
    out: list[Arrival] = []
    t0, t1 = to_epoch(start), to_epoch(end)
    for p_idx, panel in enumerate(sorted(rates)):
        rate = rates[panel] / 86400.0
        if rate <= 0:
            continue
        rng = np.random.default_rng([seed, 40, p_idx])
        expected = (t1 - t0) * rate
        times: list[int] = []
        t = float(t0)
        while True:
            gaps = rng.exponential(1.0 / rate, size=max(16, int(expected + 6 * math.sqrt(expected + 1))))
            for g in gaps:
                t += g
                if t >= t1:
                    break
                times.append(int(t))
            if t >= t1:
                break
        pids = world.sample_patients(rng, times)
        out.extend(Arrival(from_epoch(s), panel, pid) for s, pid in zip(times, pids))
    out.sort(key=lambda a: (a.time, a.panel_code, a.patient_id))
    return out


@dataclass
class SimSummary:
    start: str
    end: str
    orders_signed: int = 0
    callbacks_delivered: int = 0
    callbacks_failed: int = 0
    timer_packets: int = 0
    label_runs: int = 0
    labels_appended: int = 0
    label_errors: int = 0
    packets: int = 0
    final_time: str = ""

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _advance(clock: Any, t: datetime) -> None:
    if isinstance(clock, VirtualClock):
        clock.set(t)
    else:
        clock.sleep_until(t)


def run_simulation(stack: Stack, start: datetime, duration: timedelta, rates: Mapping[str, float], seed: int,
                   label_cron: str, maturation: timedelta, final_extraction: bool = True) -> SimSummary:
    """Step the clock from ``start`` to ``start + duration``.

    At equal timestamps orders are signed first, then timers fire, then labels
    are extracted. After the end, one last extraction runs at
    ``end + maturation`` so every matured outcome is collected. A virtual
    clock jumps between events; a paced clock is waited on.
    """
    end = start + duration
    arrivals = order_arrivals(stack.world, rates, start, end, seed)
    label_sched = parse_cron(label_cron)
    before = start - timedelta(seconds=1)
    next_label = label_sched.next_after(before)
    next_timer = stack.engine.next_timer_fire(before)
    callbacks_before = len(stack.world.callback_log)
    summary = SimSummary(format_ts(start), format_ts(end))
    far = end + timedelta(days=36500)
    i = 0
    while True:
        t_order = arrivals[i].time if i < len(arrivals) else far
        t_timer = next_timer or far
        t = min(t_order, t_timer, next_label)
        if t >= end:
            break
        _advance(stack.clock, t)
        if t == t_order:
            a = arrivals[i]
            stack.emr.sign_order(a.patient_id, a.panel_code)
            summary.orders_signed += 1
            i += 1
        elif t == t_timer:
            summary.timer_packets += len(stack.engine.tick(t))
            next_timer = stack.engine.next_timer_fire(t)
        else:
            res = extract_labels(stack.store, stack.emr, maturation, t)
            summary.label_runs += 1
            summary.labels_appended += res.labeled
            summary.label_errors += res.errors
            next_label = label_sched.next_after(t)
    _advance(stack.clock, end)
    if final_extraction:
        final = end + maturation
        _advance(stack.clock, final)
        res = extract_labels(stack.store, stack.emr, maturation, final)
        summary.label_runs += 1
        summary.labels_appended += res.labeled
        summary.label_errors += res.errors
    new_callbacks = stack.world.callback_log[callbacks_before:]
    summary.callbacks_delivered = sum(1 for e in new_callbacks if e["delivered"])
    summary.callbacks_failed = len(new_callbacks) - summary.callbacks_delivered
    summary.packets = stack.store.record_counts()["packet"]
    summary.final_time = format_ts(stack.clock.now())
    log.info("simulation finished: %s", summary)
    return summary
