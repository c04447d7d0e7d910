from datetime import timedelta

import pytest

from emrdeploy.clock import VirtualClock, utc
from emrdeploy.emr.api import build_emr_app
from emrdeploy.emr.client import EmrClient, PatientNotFound, SourceUnavailable
from emrdeploy.emr.warehouse import WarehouseFormatError, export_warehouse, load_warehouse
from emrdeploy.web import App, HttpTransport, LocalTransport, json_response, serve_app

from conftest import FaultyTransport, refuse

EMR = "http://emr.local"


def test_export_is_deterministic_and_cut_off(world, tmp_path):
    cut = utc(2017, 6, 1)
    a = export_warehouse(world, cut, tmp_path / "a")
    b = export_warehouse(world, cut, tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes()
    wh = load_warehouse(tmp_path / "a")
    assert len(wh.patients) == len(world.patients)
    assert all(o.order_time <= cut for o in wh.orders.values())
    for pid in list(wh.patients)[:50]:
        events, _ = wh.patient_events(pid)
        assert events == world.events(pid, until=cut)


def test_export_at_origin_is_header_only(world, tmp_path):
    paths = export_warehouse(world, world.start_time, tmp_path)
    assert all(len(p.read_text().splitlines()) == 1 for p in paths.values())


def test_warehouse_rejects_bad_header(world, tmp_path):
    paths = export_warehouse(world, utc(2016), tmp_path)
    text = paths["orders"].read_text().replace("order_id", "id", 1)
    paths["orders"].write_text(text)
    with pytest.raises(WarehouseFormatError):
        load_warehouse(tmp_path)


def client_for(world, now):
    clock = VirtualClock(now)
    t = LocalTransport()
    t.mount(EMR, build_emr_app(world, clock))
    world.transport = t
    return EmrClient(EMR, t), clock, t


def test_reads_respect_clock_and_since(world):
    pid = next(iter(world.patients))
    now = utc(2018, 6, 1)
    emr, _, _ = client_for(world, now)
    since = now - timedelta(days=14)
    labs = emr.observations(pid, since)
    expected = [(e.code, e.numeric_value, e.effective_time)
                for e in world.events(pid, "LabResult", since=since, until=now)]
    assert labs == expected
    assert all(t <= now for _, t in emr.conditions(pid))
    demo = emr.patient(pid)
    rec = world.patient(pid)
    assert (demo["birth_date"], demo["sex"], demo["race"]) == (rec.birth_date, rec.sex, rec.race)
    with pytest.raises(PatientNotFound):
        emr.patient("P999999")
    with pytest.raises(PatientNotFound):
        emr.conditions("P999999")


def test_order_webhook_and_results(world):
    emr, clock, transport = client_for(world, world.retro_end)
    received = []
    hook = App("hook")

    @hook.route("POST", "/cb")
    def cb(req):
        received.append(req.json())
        return json_response({"ok": True})

    transport.mount("http://hook.local", hook)
    sid = emr.subscribe("CBC", "http://hook.local/cb")
    pid = next(iter(world.patients))
    order = emr.sign_order(pid, "CBC")
    emr.sign_order(pid, "MAGNESIUM")
    assert [r["order_id"] for r in received] == [order["order_id"]]
    assert world.delivered_callbacks == 1
    assert emr.order_result(order["order_id"], "HGB") is None  # not yet resulted
    clock.advance(world.config.result_delay)
    res = emr.order_result(order["order_id"], "HGB")
    assert res["result_time"] == world.retro_end + world.config.result_delay
    emr.unsubscribe(sid)
    emr.sign_order(pid, "CBC")
    assert len(received) == 1


def test_failed_webhook_is_logged_not_retried(world):
    emr, _, transport = client_for(world, world.retro_end)
    emr.subscribe("CBC", "http://nowhere.local/cb")
    emr.sign_order(next(iter(world.patients)), "CBC")
    assert world.callback_log[-1]["delivered"] is False
    assert len(world.callback_log) == 1


def test_writeback_and_roster(world):
    emr, _, _ = client_for(world, world.retro_end)
    pid = next(iter(world.patients))
    emr.writeback("flowsheet", {"patient_id": pid, "score": 0.3})
    emr.writeback("flowsheet", {"patient_id": pid, "score": 0.4})
    log = emr.writeback_log("flowsheet")
    assert [e["sequence"] for e in log] == [1, 2]
    assert emr.writeback_log("score") == []
    with pytest.raises(PatientNotFound):
        emr.writeback("score", {"patient_id": "P999999"})
    unit = world.patient(pid).unit_id
    assert pid in emr.unit_roster(unit)
    with pytest.raises(SourceUnavailable):
        emr.unit_roster("UNIT-99")


def test_unreachable_source():
    emr = EmrClient(EMR, FaultyTransport(LocalTransport(), refuse))
    with pytest.raises(SourceUnavailable):
        emr.patient("P000001")


def test_real_sockets(world):
    clock = VirtualClock(utc(2018, 6, 1))
    http = HttpTransport()
    with serve_app(build_emr_app(world, clock)) as server:
        emr = EmrClient(server.url, http)
        local, _, _ = client_for(world, utc(2018, 6, 1))
        pid = next(iter(world.patients))
        since = utc(2018, 5, 1)
        assert emr.observations(pid, since) == local.observations(pid, since)
        assert emr.patient(pid) == local.patient(pid)
        with pytest.raises(PatientNotFound):
            emr.patient("P999999")
    with pytest.raises(SourceUnavailable):
        emr.patient(pid)
    http.close()
