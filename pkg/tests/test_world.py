from dataclasses import replace
from datetime import timedelta

import numpy as np
import pytest

from emrdeploy.clock import to_epoch, utc
from emrdeploy.emr.catalog import COMPONENTS, PANELS
from emrdeploy.emr.world import (DriftConfig, InvalidConfig, UnknownPatient, WorldConfig, generate_world,
                                 world_digest)

from conftest import SMALL_WORLD


def test_same_config_same_world():
    assert world_digest(generate_world(SMALL_WORLD)) == world_digest(generate_world(SMALL_WORLD))
    assert world_digest(generate_world(replace(SMALL_WORLD, seed=12))) != world_digest(generate_world(SMALL_WORLD))


@pytest.mark.parametrize("bad", [dict(condition_vocab_size=0), dict(medication_vocab_size=0),
                                 dict(n_patients=0), dict(signal_strength=-1.0), dict(panels=("XYZ",))])
def test_invalid_configs(bad):
    with pytest.raises(InvalidConfig):
        replace(SMALL_WORLD, **bad).validate()
        generate_world(replace(SMALL_WORLD, **bad))


def test_config_round_trip():
    cfg = replace(SMALL_WORLD, drift=DriftConfig(utc(2019, 1, 10), 0.5, {"HGB": 1.0}, 0.25))
    assert WorldConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfig):
        WorldConfig.from_dict({**cfg.to_dict(), "colour": "blue"})


def test_result_invariants(world):
    for oid, results in list(world.results.items())[:500]:
        order = world.orders[oid]
        assert tuple(r.component_code for r in results) == PANELS[order.panel_code]
        for r in results:
            assert r.abnormal == (r.value < r.ref_low or r.value > r.ref_high)
            assert r.result_time >= order.order_time


def test_ordered_prevalence_near_catalog():
    # Large enough that the sampling error is about 0.01.
    w = generate_world(replace(SMALL_WORLD, n_patients=3000, orders_per_year=1500, panels=("CBC",)))
    for code in PANELS["CBC"]:
        rate = np.mean([r.abnormal for rs in w.results.values() for r in rs if r.component_code == code])
        assert abs(rate - COMPONENTS[code].prevalence) < 0.05, code


def test_features_track_severity(world):
    sev = np.array([world.severity(p) for p in world.patients])
    n_cond = np.array([len(world.events(p, "Condition")) for p in world.patients])
    assert np.corrcoef(sev, n_cond)[0, 1] > 0.3


def test_zero_signal_decouples_results_from_severity():
    w = generate_world(replace(SMALL_WORLD, signal_strength=0.0, panels=("CBC",)))
    sev, abn = [], []
    for oid, rs in w.results.items():
        sev.append(w.severity(w.orders[oid].patient_id))
        abn.append(next(r.abnormal for r in rs if r.component_code == "HGB"))
    assert abs(np.corrcoef(sev, abn)[0, 1]) < 0.06


def test_events_window_and_unknown_patient(world):
    pid = next(iter(world.patients))
    evs = world.events(pid)
    assert evs == sorted(evs, key=lambda e: e.effective_time)
    t = evs[len(evs) // 2].effective_time
    assert all(e.effective_time >= t for e in world.events(pid, since=t))
    assert all(e.effective_time <= t for e in world.events(pid, until=t))
    with pytest.raises(UnknownPatient):
        world.events("P999999")


def test_drift_leaves_earlier_facts_untouched():
    start = utc(2019, 1, 15)
    drifted = replace(SMALL_WORLD, drift=DriftConfig(start, covariate_shift=1.0, prevalence_shift={"HGB": 2.0},
                                                     concept_shift=0.5))
    a, b = generate_world(SMALL_WORLD), generate_world(drifted)
    for pid in list(a.patients)[:100]:
        assert a.events(pid, until=start - timedelta(seconds=1)) == b.events(pid, until=start - timedelta(seconds=1))
    assert a.results == b.results
    # Orders sampled before the drift start pick the same patients.
    times = [to_epoch(start) - 3600 * k for k in range(50, 0, -1)] + [to_epoch(start) + 60 * k for k in range(50)]
    pa = a.sample_patients(np.random.default_rng(0), times)
    pb = b.sample_patients(np.random.default_rng(0), times)
    assert pa[:50] == pb[:50]
    assert pa[50:] != pb[50:]
    # After the start the presenting population is sicker.
    late = [to_epoch(start) + 60 * k for k in range(4000)]
    sev_a = np.mean([a.severity(p) for p in a.sample_patients(np.random.default_rng(1), late)])
    sev_b = np.mean([b.severity(p) for p in b.sample_patients(np.random.default_rng(1), late)])
    assert sev_b - sev_a > 0.6


def test_prevalence_shift_after_start():
    start = utc(2019, 1, 2)
    w = generate_world(replace(SMALL_WORLD, drift=DriftConfig(start, prevalence_shift={"HGB": 3.0})))
    base = generate_world(SMALL_WORLD)
    pids = list(w.patients)[:300]
    for world in (w, base):
        for i, pid in enumerate(pids):
            world.sign_order(pid, "CBC", start + timedelta(minutes=i), dispatch=False)

    def rate(world):
        new = [o for o in world.orders.values() if o.order_time >= start]
        return np.mean([r.abnormal for o in new for r in world.results[o.order_id] if r.component_code == "HGB"])

    assert rate(w) > rate(base) + 0.2


def test_replay_reproduces_orders(world):
    pids = list(world.patients)[:5]
    for i, pid in enumerate(pids):
        world.sign_order(pid, "CBC", world.retro_end + timedelta(minutes=i), dispatch=False)
    fresh = generate_world(SMALL_WORLD)
    assert fresh.replay_orders(world.order_log) == 5
    for entry in world.order_log:
        assert fresh.results[entry["order_id"]] == world.results[entry["order_id"]]
    bad = [dict(world.order_log[0], order_id="O00000001")]
    with pytest.raises(ValueError):
        generate_world(SMALL_WORLD).replay_orders(bad)


def test_withheld_results_never_visible(world):
    oid = next(iter(world.orders))
    world.withhold_results(oid)
    assert world.visible_results(oid, utc(2100)) == ()
