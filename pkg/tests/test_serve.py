import json
import logging
import random
import threading
from datetime import timedelta

import pytest
from hypothesis import given
from hypothesis import strategies as st

from emrdeploy.clock import format_ts, utc
from emrdeploy.emr.client import EmrClient
from emrdeploy.serve.arms import DISPLAY, SUPPRESS, ArmAssigner, assign_arm, replay_arms, uniform_draw
from emrdeploy.serve.cron import CronSyntaxError, cron_matches, cron_next, parse_cron
from emrdeploy.serve.engine import (ALERT, LOUD, DeploymentConflict, EventTrigger, RegistrationFailed,
                                    TimerTrigger, TriggerConfig, parse_alert)
from emrdeploy.serve.store import InferencePacket, LabelUpdate, PacketStore, StoreCorruptError
from emrdeploy.sim import EMR_URL, SERVE_URL, build_http_stack
from emrdeploy.web import HttpTransport, Response, TransportError

from conftest import FaultyTransport, refuse
from oracles import cron_next_oracle, random_cron, random_instant

# ---------------------------------------------------------------------- cron


def test_cron_examples():
    t = utc(2021, 3, 1, 10, 7, 30)
    assert cron_next("*/15 * * * *", t) == utc(2021, 3, 1, 10, 15)
    assert cron_next("0 0 * * *", t) == utc(2021, 3, 2)
    assert cron_next("0 9 * * 1-5", utc(2021, 3, 5, 9)) == utc(2021, 3, 8, 9)  # Friday -> Monday
    assert cron_next("0 0 29 2 *", t) == utc(2024, 2, 29)
    assert cron_next("0 0 13 * 5", utc(2021, 3, 1)) == utc(2021, 3, 5)  # either day field fires
    assert cron_next("0 0 * * 7", utc(2021, 3, 1)) == utc(2021, 3, 7)  # 7 is Sunday
    assert cron_next("30 8 1/10 * *", utc(2021, 3, 1, 9)) == utc(2021, 3, 11, 8, 30)
    assert cron_matches("*/15 * * * *", utc(2021, 1, 1, 0, 45))
    assert not cron_matches("*/15 * * * *", utc(2021, 1, 1, 0, 45, 1))


@pytest.mark.parametrize("expr", ["* * * *", "60 * * * *", "* 24 * * *", "* * 0 * *", "* * * 13 *",
                                  "* * * * 8", "5-1 * * * *", "*/0 * * * *", "a * * * *", ", * * * *",
                                  "0 0 31 2 *", "0 0 30,31 2 *"])
def test_cron_rejects(expr):
    with pytest.raises(CronSyntaxError):
        parse_cron(expr)


def test_cron_matches_oracle_on_random_pairs():
    rng = random.Random(20)
    for _ in range(300):
        expr, after = random_cron(rng), random_instant(rng)
        assert cron_next(expr, after) == cron_next_oracle(expr, after), (expr, after)


@given(st.integers(0, 10**9))
def test_cron_next_is_strictly_later_and_matches(seconds):
    after = utc(2000) + timedelta(seconds=seconds)
    nxt = cron_next("7,37 */3 * * 1,3", after)
    assert nxt > after and cron_matches("7,37 */3 * * 1,3", nxt)
    assert nxt - after <= timedelta(days=7)


# ---------------------------------------------------------------------- arms


def test_arm_draws_replay_and_are_balanced():
    a = ArmAssigner("arms:m", 42, 0.5)
    drawn = [a.draw() for _ in range(2000)]
    assert [d.arm for d in drawn] == replay_arms("arms:m", 42, 0.5, 2000)
    assert [d.index for d in drawn] == list(range(2000))
    assert abs(sum(d.arm == SUPPRESS for d in drawn) / 2000 - 0.5) < 0.04
    resumed = ArmAssigner("arms:m", 42, 0.5, next_index=1000)
    assert resumed.draw().arm == drawn[1000].arm
    assert replay_arms("arms:m", 43, 0.5, 50) != replay_arms("arms:m", 42, 0.5, 50)


def test_arm_extremes_and_errors():
    assert set(replay_arms("x", 1, 0.0, 100)) == {DISPLAY}
    assert set(replay_arms("x", 1, 1.0, 100)) == {SUPPRESS}
    assert all(0.0 <= uniform_draw("x", 1, i) < 1.0 for i in range(100))
    with pytest.raises(ValueError):
        assign_arm("x", 1, 0, 1.5)
    with pytest.raises(ValueError):
        ArmAssigner("x", 1, -0.1)


def test_arm_assigner_thread_safe():
    a = ArmAssigner("t", 3, 0.5)
    out = []

    def worker():
        for _ in range(250):
            out.append(a.draw().index)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(out) == list(range(1000))


# --------------------------------------------------------------------- store


def packet(i, **kw):
    base = dict(packet_id=f"m-{i:08d}", model_id="m", patient_id="P000001", order_id=f"O{i}",
                inference_time=utc(2021, 1, 1) + timedelta(hours=i), features=((0, 1), (3, 2)), score=0.25,
                arm=DISPLAY, routed=())
    base.update(kw)
    return InferencePacket(**base)


def test_store_round_trip_and_labels(tmp_path):
    store = PacketStore(tmp_path / "p.jsonl")
    for i in range(3):
        store.append_packet(packet(i))
    store.append_label(LabelUpdate("m-00000001", True, utc(2021, 2, 1), {"sex": "F"}))
    again = PacketStore(tmp_path / "p.jsonl")
    ps = again.read_packets()
    assert [p.packet_id for p in ps] == ["m-00000000", "m-00000001", "m-00000002"]
    assert ps[1].label is True and ps[1].attributes == {"sex": "F"} and ps[0].label is None
    assert ps[0] == packet(0)
    assert again.new_packet_id("m") == "m-00000004"
    assert [p.packet_id for p in again.read_packets(since=utc(2021, 1, 1, 1), until=utc(2021, 1, 1, 2))] == \
        ["m-00000001"]
    with pytest.raises(ValueError):
        store.append_packet(packet(9, label=True))


def test_torn_tail_loses_one_record_and_warns(tmp_path, caplog):
    path = tmp_path / "p.jsonl"
    store = PacketStore(path)
    for i in range(4):
        store.append_packet(packet(i))
    data = path.read_bytes()
    path.write_bytes(data[:-25])
    with caplog.at_level(logging.WARNING):
        reopened = PacketStore(path)
    assert reopened.torn_records == 1
    assert len(reopened.read_packets()) == 3
    assert "torn final record" in caplog.text
    reopened.append_packet(packet(4))
    assert [p.packet_id for p in PacketStore(path).read_packets()][-1] == "m-00000004"


def test_corruption_in_the_middle_is_fatal(tmp_path):
    path = tmp_path / "p.jsonl"
    store = PacketStore(path)
    for i in range(3):
        store.append_packet(packet(i))
    lines = path.read_bytes().split(b"\n")
    lines[1] = b"{garbage"
    path.write_bytes(b"\n".join(lines))
    with pytest.raises(StoreCorruptError) as err:
        PacketStore(path)
    assert err.value.offset == len(lines[0]) + 1


def test_concurrent_appends_do_not_interleave(tmp_path):
    store = PacketStore(tmp_path / "p.jsonl")

    def worker(k):
        for i in range(50):
            store.append_packet(packet(k * 100 + i))

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(PacketStore(tmp_path / "p.jsonl").read_packets()) == 200


# -------------------------------------------------------------------- engine


def order_payload(world, pid, oid="O1", panel="CBC", when=None):
    return {"patient_id": pid, "order_id": oid, "panel_code": panel,
            "order_time": format_ts(when or world.retro_end)}


def test_event_trigger_writes_one_packet_per_order(stack, small_model):
    dep = stack.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
    pids = list(stack.world.patients)[:5]
    for pid in pids:
        stack.emr.sign_order(pid, "CBC")
    stack.emr.sign_order(pids[0], "METABOLIC")
    packets = stack.store.read_packets()
    assert len(packets) == 5 == stack.world.delivered_callbacks
    assert all(p.mode == "Silent" and p.routed == () and p.arm == DISPLAY for p in packets)
    assert stack.emr.writeback_log("score") == []
    assert dep.counters["packets"] == 5
    with pytest.raises(DeploymentConflict):
        stack.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))


def test_stored_features_match_recomputation(stack, small_model):
    from emrdeploy.features.history import fetch_history_transactional
    from emrdeploy.features.vocab import featurize
    stack.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
    pid = list(stack.world.patients)[7]
    stack.emr.sign_order(pid, "CBC")
    p = stack.store.read_packets()[0]
    x = featurize(fetch_history_transactional(stack.emr, pid, p.inference_time), small_model.bundle.vocabulary)
    assert p.feature_dict() == dict(x.entries)
    assert p.score == small_model.bundle.predict_proba(x)


def test_handle_event_status_codes(stack, small_model):
    eng = stack.engine
    dep = eng.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
    pid = next(iter(stack.world.patients))
    assert eng.handle_event("nope", order_payload(stack.world, pid)).status == 404
    assert eng.handle_event("cbc-hgb", {"patient_id": pid}).status == 400
    assert eng.handle_event("cbc-hgb", order_payload(stack.world, pid, panel="METABOLIC")).status == 422
    assert eng.handle_event("cbc-hgb", order_payload(stack.world, "P999999")).status == 404
    dep.pause()
    assert eng.handle_event("cbc-hgb", order_payload(stack.world, pid)).status == 409
    dep.resume()
    ok = eng.handle_event("cbc-hgb", order_payload(stack.world, pid))
    assert ok.status == 200 and "score" not in ok.json()
    assert len(stack.store.read_packets()) == 1


def test_unreachable_emr_is_503_and_writes_nothing(stack, small_model):
    dep = stack.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
    stack.engine.emr = EmrClient(EMR_URL, FaultyTransport(stack.transport, refuse))
    resp = stack.engine.handle_event("cbc-hgb", order_payload(stack.world, next(iter(stack.world.patients))))
    assert resp.status == 503
    assert stack.store.read_packets() == []
    assert dep.counters["source_unavailable"] == 1


def test_registration_fails_when_emr_down(world, tmp_path, small_model):
    from emrdeploy.sim import build_stack
    s = build_stack(world, tmp_path / "p.jsonl", world.retro_end)
    s.engine.emr = EmrClient(EMR_URL, FaultyTransport(s.transport, refuse))
    with pytest.raises(RegistrationFailed):
        s.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
    assert s.engine.deployments == {}


def test_loud_mode_routes_and_records_failures(stack, small_model):
    def break_flowsheet(method, url):
        if "/writeback/flowsheet" in url:
            return Response(500, b"down", "text/plain")
        return None

    cfg = TriggerConfig(EventTrigger("CBC"), mode=LOUD, routes=("ScoreColumn", "Flowsheet", ALERT))
    stack.engine.register_deployment(small_model.bundle, cfg)
    stack.engine.emr = EmrClient(EMR_URL, FaultyTransport(stack.transport, break_flowsheet))
    pid = next(iter(stack.world.patients))
    resp = stack.engine.handle_event("cbc-hgb", order_payload(stack.world, pid))
    alert = parse_alert(resp.body)
    assert alert["model_id"] == "cbc-hgb" and float(alert["threshold"]) == pytest.approx(
        small_model.bundle.decision_threshold, abs=1e-6)
    p = stack.store.read_packets()[0]
    assert p.routed == ("ScoreColumn", "Flowsheet:failed", ALERT)
    assert len(stack.emr.writeback_log("score")) == 1
    assert stack.emr.writeback_log("flowsheet") == []


def test_loud_suppress_arm_routes_nothing(stack, small_model):
    cfg = TriggerConfig(EventTrigger("CBC"), mode=LOUD, routes=("ScoreColumn",), randomization_p=1.0)
    stack.engine.register_deployment(small_model.bundle, cfg)
    stack.emr.sign_order(next(iter(stack.world.patients)), "CBC")
    p = stack.store.read_packets()[0]
    assert p.arm == SUPPRESS and p.routed == ()
    assert stack.emr.writeback_log("score") == []


def test_timer_trigger_scores_the_roster(stack, small_model):
    unit = stack.world.patient(next(iter(stack.world.patients))).unit_id
    roster = stack.emr.unit_roster(unit)
    stack.engine.register_deployment(small_model.bundle, TriggerConfig(TimerTrigger("*/30 * * * *", unit)))
    t0 = stack.clock.now()
    fire = stack.engine.next_timer_fire(t0)
    stack.clock.set(fire)
    assert len(stack.engine.tick(fire)) == len(roster)
    assert stack.engine.tick(fire + timedelta(minutes=1)) == []
    assert all(p.order_id is None for p in stack.store.read_packets())
    with pytest.raises(ValueError):
        TimerTrigger("bad cron", unit)


def test_pause_resume_over_the_app(stack, small_model):
    stack.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
    assert stack.transport.request("POST", f"{SERVE_URL}/models/cbc-hgb/pause").json()["status"] == "Paused"
    listing = stack.transport.request("GET", f"{SERVE_URL}/models").json()["models"]
    assert listing[0]["status"] == "Paused"
    stack.emr.sign_order(next(iter(stack.world.patients)), "CBC")
    assert stack.store.read_packets() == []
    stack.transport.request("POST", f"{SERVE_URL}/models/cbc-hgb/resume")
    stack.emr.sign_order(next(iter(stack.world.patients)), "CBC")
    assert len(stack.store.read_packets()) == 1
    assert stack.transport.request("POST", f"{SERVE_URL}/models/zzz/pause").status == 404


def test_trigger_config_round_trip():
    for cfg in (TriggerConfig(EventTrigger("CBC"), LOUD, ("Flowsheet", ALERT), 0.5, 9),
                TriggerConfig(TimerTrigger("0 * * * *", "UNIT-01"))):
        assert TriggerConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        TriggerConfig(EventTrigger("CBC"), routes=("Pager",))
    with pytest.raises(ValueError):
        EventTrigger("XYZ")


def test_real_socket_stack(world, tmp_path, small_model):
    from emrdeploy.clock import VirtualClock
    stack = build_http_stack(world, tmp_path / "p.jsonl", VirtualClock(world.retro_end))
    try:
        stack.engine.register_deployment(small_model.bundle, TriggerConfig(EventTrigger("CBC")))
        assert stack.engine.deployments["cbc-hgb"].endpoint.startswith("http://127.0.0.1:")
        for pid in list(world.patients)[:3]:
            stack.emr.sign_order(pid, "CBC")
        assert len(stack.store.read_packets()) == 3 == world.delivered_callbacks
    finally:
        stack.close()
    probe = HttpTransport()
    with pytest.raises(TransportError):
        probe.request("GET", stack.engine.base_url + "/models")
    probe.close()
