"""The ten acceptance criteria, each printing one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py``. Criterion 6 runs 21 full trials and
dominates the runtime.
"""

from __future__ import annotations

import contextlib
import functools
import io
import json
import logging
import math
import random
import sys
import tempfile
import time
from dataclasses import replace
from datetime import date, timedelta
from pathlib import Path

import pytest

from emrdeploy.cli import main as cli_main
from emrdeploy.clock import utc
from emrdeploy.config import TrialConfig
from emrdeploy.emr.warehouse import export_warehouse, load_warehouse
from emrdeploy.emr.world import WorldConfig, generate_world
from emrdeploy.features.history import make_history
from emrdeploy.features.vocab import bin_numeric, build_vocabulary, quintile_edges, tokenize_history
from emrdeploy.model.cohort import TEST, TRAIN, VALIDATION, build_cohort, split_for_year
from emrdeploy.model.train import fit_model
from emrdeploy.monitor.bootstrap import bootstrap_ci
from emrdeploy.monitor.drift import PREDICTION
from emrdeploy.monitor.labels import LabeledSample, extract_labels
from emrdeploy.monitor.metrics import auroc, confusion_at_threshold, net_benefit
from emrdeploy.monitor.report import build_metric_report, render_report, subgroup_metrics
from emrdeploy.serve.arms import SUPPRESS, ArmAssigner, replay_arms
from emrdeploy.serve.cron import cron_next
from emrdeploy.serve.engine import EventTrigger, TimerTrigger, TriggerConfig
from emrdeploy.serve.store import InferencePacket, PacketStore
from emrdeploy.sim import build_stack, run_simulation
from emrdeploy.trial import parity_check, run_trial

sys.path.insert(0, str(Path(__file__).parent))
from conftest import SMALL_FOREST, SMALL_WORLD  # noqa: E402
from oracles import (auroc_pairs, bootstrap_reference, confusion_by_hand, cron_next_oracle,  # noqa: E402
                     net_benefit_direct, random_cron, random_instant, tied_sample)

CONTROL_SEEDS = range(100, 120)
_SCRATCH = tempfile.TemporaryDirectory(prefix="emrdeploy-accept-")  # removed at interpreter exit


def scratch() -> Path:
    return Path(tempfile.mkdtemp(dir=_SCRATCH.name))


@functools.lru_cache(maxsize=None)
def small_bundle():
    world = generate_world(SMALL_WORLD)
    dest = scratch() / "wh"
    export_warehouse(world, world.retro_end, dest)
    wh = load_warehouse(dest)
    years = range(SMALL_WORLD.start_year, SMALL_WORLD.start_year + SMALL_WORLD.n_years)
    cohort = build_cohort(wh, "CBC", "HGB", 200, years, seed=1)
    return fit_model(wh, cohort, "cbc-hgb", utc(2019), SMALL_FOREST, seed=2).bundle


# ------------------------------------------------------------------ criteria
def criterion_1():
    t = time.perf_counter()
    rng = random.Random(1)
    bad = []
    for i in range(200):
        s, y = tied_sample(rng, 50)
        pt = rng.choice([0.05, 0.1, 0.2, 0.3, 0.5, 0.7])
        thr = rng.randint(0, 10) / 10
        c = confusion_at_threshold(s, y, thr)
        nb = net_benefit(s, y, [pt])[0]["model"]
        if (auroc(s, y) != auroc_pairs(s, y) or (c["tp"], c["fp"], c["fn"], c["tn"]) != confusion_by_hand(s, y, thr)
                or abs(nb - net_benefit_direct(s, y, pt)) > 1e-12):
            bad.append(i)
    secs = time.perf_counter() - t
    return not bad and secs < 5, f"200 sets, {len(bad)} mismatches, {secs:.2f}s"


def criterion_2():
    t = time.perf_counter()
    rng = random.Random(2)
    bad = []
    for i in range(20):
        s, y = tied_sample(rng, 50)
        ci = bootstrap_ci(auroc, s, y, B=1000, level=0.95, seed=i)
        again = bootstrap_ci(auroc, s, y, B=1000, level=0.95, seed=i)
        if ci != again or ci.as_tuple() != bootstrap_reference(s, y, B=1000, level=0.95, seed=i):
            bad.append(i)
    secs = time.perf_counter() - t
    return not bad and secs < 30, f"20 sets at B=1000, {len(bad)} mismatches, {secs:.2f}s"


def criterion_3():
    world = generate_world(TrialConfig().world)
    dest = scratch() / "wh"
    export_warehouse(world, world.retro_end, dest)
    wh = load_warehouse(dest)
    t = time.perf_counter()
    res = parity_check(world, wh, 1000, seed=3)
    secs = time.perf_counter() - t
    return res.ok and res.n == 1000 and secs < 30, \
        f"{res.n} pairs on {len(world.patients)} patients, {len(res.mismatches)} mismatches, {secs:.2f}s"


def criterion_4():
    T, day, sec = utc(2020, 6, 1, 12), timedelta(days=1), timedelta(seconds=1)
    meds = [("MED001", T - 28 * day), ("MED002", T - 28 * day - sec), ("MED003", T)]
    labs = [("HGB", 10.0, T - 14 * day), ("HGB", 11.0, T - 14 * day - sec), ("HGB", 12.0, T)]
    h = make_history(date(1970, 1, 1), "F", "White", (), meds, labs, T)
    tokens = tokenize_history(h, build_vocabulary([h]))
    checks = {
        "med 28d": [t for t in tokens if t.startswith("MED")] == ["MED001"],
        "lab 14d": [t for t in tokens if t.startswith("HGB")] == ["HGB#0"],
        "quintiles": quintile_edges(range(1, 11)) == (2, 4, 6, 8)
        and [bin_numeric(v, (2, 4, 6, 8)) for v in range(1, 11)] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4],
        "splits": [split_for_year(y, range(2015, 2022)) for y in range(2015, 2022)]
        == [TRAIN] * 5 + [VALIDATION, TEST],
    }
    failed = [k for k, ok in checks.items() if not ok]
    return not failed, "all exact" if not failed else f"failed: {', '.join(failed)}"


def criterion_5():
    out = scratch() / "demo"
    t = time.perf_counter()
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli_main(["demo", "--out", str(out)])
    secs = time.perf_counter() - t
    lines = [json.loads(x) for x in buf.getvalue().splitlines() if x.startswith("{")]
    if code != 0 or not lines:
        return False, f"demo exited {code}"
    info = lines[-1]
    retro, pro = info["retrospective_auroc"], info["prospective_auroc"]
    ok = (code == 0 and info["packets"] >= 2000 and info["packets"] == info["callbacks_delivered"]
          and info["writebacks"] == 0 and retro >= 0.85 and abs(pro - retro) <= 0.05 and secs < 180)
    return ok, (f"packets {info['packets']}, delivered {info['callbacks_delivered']}, writebacks "
                f"{info['writebacks']}, retro {retro:.4f}, pro {pro:.4f}, {secs:.1f}s")


def criterion_6():
    base = TrialConfig()
    drifted = replace(base, sim=replace(base.sim, drift_at=base.sim.duration / 2),
                      drift_covariate_shift=0.5, drift_concept_shift=0.5)
    res = run_trial(drifted, scratch() / "drift")
    gap = res.retrospective_auroc - res.prospective_auroc
    flags = [q for d in res.reports.drift for q, _ in d.flags]
    feature_flags = sum(q.startswith("feature:") for q in flags)
    has_pred = PREDICTION in flags
    t = time.perf_counter()
    flagged = []
    for seed in CONTROL_SEEDS:
        with tempfile.TemporaryDirectory(prefix="emrdeploy-control-") as tmp:
            ctrl = run_trial(base.with_seed(seed), tmp, full_report=False)
            ctrl.stack.close()
        if any(d.flags for d in ctrl.reports.drift):
            flagged.append(seed)
    clean = len(CONTROL_SEEDS) - len(flagged)
    ok = gap >= 0.03 and feature_flags >= 1 and has_pred and clean >= 19
    return ok, (f"retro {res.retrospective_auroc:.4f}, pro {res.prospective_auroc:.4f}, gap {gap:.4f}, "
                f"feature flags {feature_flags}, prediction flag {has_pred}, clean controls {clean}/20 "
                f"(flagged {flagged}), controls {time.perf_counter() - t:.0f}s")


def criterion_7():
    world = generate_world(WorldConfig(seed=21, n_patients=3, n_units=1, n_years=2, orders_per_year=10,
                                       prospective_days=2))
    start = world.retro_end.replace(minute=0, second=0, microsecond=0) + timedelta(hours=1)
    stack = build_stack(world, scratch() / "p.jsonl", start)
    stack.engine.register_deployment(small_bundle(), TriggerConfig(TimerTrigger("*/15 * * * *", "UNIT-01")))
    summary = run_simulation(stack, start, timedelta(hours=1), {}, 1, "0 */6 * * *", timedelta(hours=6))
    stack.close()
    roster = len(world.unit_roster("UNIT-01"))
    rng = random.Random(7)
    wrong = 0
    for _ in range(1000):
        expr, after = random_cron(rng), random_instant(rng)
        wrong += cron_next(expr, after) != cron_next_oracle(expr, after)
    ok = roster == 3 and summary.packets == 12 and summary.timer_packets == 12 and wrong == 0
    return ok, f"{summary.packets} packets from a {roster}-patient unit, cron_next {wrong}/1000 mismatches"


def criterion_8():
    a = ArmAssigner("arms:acceptance", 8, 0.5)
    arms = [a.draw().arm for _ in range(10_000)]
    freq = sum(x == SUPPRESS for x in arms) / len(arms)
    replay = arms == replay_arms("arms:acceptance", 8, 0.5, 10_000)
    return abs(freq - 0.5) <= 0.015 and replay, f"suppress frequency {freq:.4f}, replay identical {replay}"


def criterion_9():
    def s(i, score, label, sex):
        return LabeledSample(f"p{i}", score, label, utc(2021, 1, 1), {"sex": sex})

    cohort = [s(0, 0.9, True, "F"), s(1, 0.8, True, "F"), s(2, 0.2, False, "F"), s(3, 0.1, False, "F"),
              s(4, 0.6, True, "M"), s(5, 0.6, False, "M"), s(6, 0.5, False, "X"), s(7, 0.4, False, "X")]
    rows = {r["group"]: r["auroc"]["point"] for r in subgroup_metrics(cohort, ("sex",), B=200)}
    report = build_metric_report("m", "constructed", cohort, 0.5, B=200, groupings=("sex",))
    html = render_report([report], [], scratch() / "r")["html"].read_text()
    ok = rows["F"] == 1.0 and rows["M"] == 0.5 and math.isnan(rows["X"]) and "NaN" in html
    return ok, f"F {rows['F']}, M {rows['M']}, X {rows['X']}, NaN rendered {'NaN' in html}"


class _Capture(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def criterion_10():
    path = scratch() / "torn.jsonl"
    store = PacketStore(path)
    for i in range(5):
        store.append_packet(InferencePacket(f"m-{i:08d}", "m", "P000001", f"O{i}",
                                            utc(2021, 1, 1) + timedelta(hours=i), ((0, 1),), 0.3, SUPPRESS, ()))
    path.write_bytes(path.read_bytes()[:-20])
    cap = _Capture()
    logging.getLogger("emrdeploy").addHandler(cap)
    try:
        reopened = PacketStore(path)
    finally:
        logging.getLogger("emrdeploy").removeHandler(cap)
    kept = len(reopened.read_packets())
    warned = any("torn" in m for m in cap.messages)

    world = generate_world(SMALL_WORLD)
    stack = build_stack(world, scratch() / "p.jsonl", world.retro_end)
    stack.engine.register_deployment(small_bundle(), TriggerConfig(EventTrigger("CBC")))
    for pid in list(world.patients)[:8]:
        stack.emr.sign_order(pid, "CBC")
    stack.clock.advance(timedelta(days=2))
    first = extract_labels(stack.store, stack.emr, timedelta(hours=24), stack.clock.now())
    before = stack.store.path.read_bytes()
    second = extract_labels(stack.store, stack.emr, timedelta(hours=24), stack.clock.now())
    same = stack.store.path.read_bytes() == before
    stack.close()
    ok = kept == 4 and reopened.torn_records == 1 and warned and first.labeled == 8 and second.labeled == 0 and same
    return ok, (f"kept {kept}/5 after tear, warned {warned}, labels {first.labeled} then {second.labeled}, "
                f"store unchanged {same}")


# -------------------------------------------------------------------- runner
def announce(n: int, ok: bool, detail: str, capsys=None) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    if capsys is None:
        print(line, flush=True)
    else:
        with capsys.disabled():
            print("\n" + line, flush=True)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
            6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10}


@pytest.mark.parametrize("n", [pytest.param(n, marks=pytest.mark.slow) if n in (5, 6) else n for n in CRITERIA])
def test_criterion(n, capsys):
    ok, detail = CRITERIA[n]()
    announce(n, ok, detail, capsys)
    assert ok, detail


if __name__ == "__main__":
    results = {}
    for n, fn in CRITERIA.items():
        ok, detail = fn()
        announce(n, ok, detail)
        results[n] = ok
    sys.exit(0 if all(results.values()) else 1)
