"""Stages of a trial, shared by the CLI subcommands and the one-shot demo.

Each stage reads and writes plain files under an output directory so stages
can run separately; the world itself is never stored because it regenerates
bit-identically from its config.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .clock import age_in_years, format_ts, from_epoch, parse_ts, to_epoch
from .config import TrialConfig
from .emr.warehouse import Warehouse, export_warehouse, load_warehouse
from .emr.world import World, WorldConfig, generate_world, world_digest
from .features.history import fetch_history_transactional, load_history_warehouse
from .features.vocab import build_vocabulary, featurize
from .model.bundle import ModelBundle, load_bundle, save_bundle
from .model.cohort import TEST, Cohort, CohortRow, build_cohort
from .model.train import TrainedModel, fit_model
from .monitor.drift import DriftBaseline, DriftSnapshot, drift_snapshot
from .monitor.labels import AGE_SPLIT, ExtractionResult, LabeledSample, extract_labels, labeled_samples
from .monitor.report import MetricReport, build_metric_report, render_report
from .serve.store import PacketStore
from .sim import SimSummary, Stack, build_stack, run_simulation

log = logging.getLogger(__name__)

WORLD_FILE = "world.json"
COHORT_FILE = "cohort.tsv"
BUNDLE_FILE = "bundle.json"
RETRO_FILE = "retrospective_test.json"
BASELINE_FILE = "baseline.json"
DEPLOYMENT_FILE = "deployment.json"
PACKETS_FILE = "packets.jsonl"
ORDER_LOG_FILE = "order_log.jsonl"
SIM_FILE = "sim_summary.json"
SIM_WORLD_FILE = "sim_world.json"
MANIFEST_FILE = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        self.message = message
        super().__init__(f"{stage}: {message}")


def file_digest(path: str | Path) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for child in sorted(p.rglob("*")):
            if child.is_file():
                h.update(child.relative_to(p).as_posix().encode())
                h.update(child.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


def write_json(path: Path, obj: Any) -> Path:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


@dataclass
class RunManifest:
    """Provenance of a run: config, seeds, per-stage inputs/outputs and time spans."""

    path: Path
    doc: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def open(cls, out: Path) -> RunManifest:
        p = out / MANIFEST_FILE
        doc = read_json(p) if p.exists() else {"package_version": __version__, "stages": []}
        return cls(p, doc)

    def record(self, stage: str, inputs: dict[str, str], outputs: dict[str, Path], wall_seconds: float,
               virtual_span: tuple[datetime, datetime] | None = None, extra: dict[str, Any] | None = None) -> None:
        entry = {"stage": stage, "inputs": inputs,
                 "outputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in outputs.items()},
                 "wall_seconds": round(wall_seconds, 3)}
        if virtual_span:
            entry["virtual_span"] = [format_ts(virtual_span[0]), format_ts(virtual_span[1])]
        if extra:
            entry.update(extra)
        self.doc["stages"] = [s for s in self.doc["stages"] if s["stage"] != stage] + [entry]
        write_json(self.path, self.doc)


# ------------------------------------------------------------------ world
def save_world_config(config: WorldConfig, out: Path) -> Path:
    return write_json(out / WORLD_FILE, config.to_dict())


def load_world_config(out: Path, name: str = WORLD_FILE) -> WorldConfig:
    p = out / name
    if not p.exists():
        raise StageError("world", f"{p} missing; run gen-world first")
    return WorldConfig.from_dict(read_json(p))


def prospective_world_config(out: Path, cfg: TrialConfig) -> WorldConfig:
    """The stored world with the trial's drift (if any) placed relative to the simulation start.

    Drift only changes facts after its start, so the warehouse exported from
    the stored world stays valid.
    """
    return replace(cfg, world=load_world_config(out)).resolved_world()


def stage_world(cfg: TrialConfig, out: Path) -> tuple[World, Path]:
    wc = cfg.resolved_world()
    world = generate_world(wc)
    path = save_world_config(wc, out)
    write_json(out / "world_digest.json", {"digest": world_digest(world), "n_events": world.n_events,
                                           "n_orders": len(world.orders)})
    return world, path


def stage_warehouse(world: World, out: Path) -> tuple[Warehouse, Path]:
    dest = out / "warehouse"
    export_warehouse(world, world.retro_end, dest)
    return load_warehouse(dest), dest


# ------------------------------------------------------------------ cohort / training
def save_cohort(cohort: Cohort, path: Path) -> Path:
    lines = ["order_id\tpatient_id\tpanel_code\tcomponent_code\tinference_time\tlabel\tsplit"]
    lines += [f"{r.order_id}\t{r.patient_id}\t{r.panel_code}\t{r.component_code}\t{format_ts(r.inference_time)}\t"
              f"{'true' if r.label else 'false'}\t{r.split}" for r in cohort.rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_cohort(path: Path) -> Cohort:
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        oid, pid, panel, comp, ts, label, split = line.split("\t")
        rows.append(CohortRow(oid, pid, panel, comp, parse_ts(ts), label == "true", split))
    return Cohort(rows)


def stage_cohort(wh: Warehouse, cfg: TrialConfig, world_cfg: WorldConfig) -> Cohort:
    years = range(world_cfg.start_year, world_cfg.start_year + world_cfg.n_years)
    return build_cohort(wh, cfg.task.panel_code, cfg.task.component_code, cfg.task.per_year, years,
                        cfg.task.cohort_seed)


def retrospective_samples(trained: TrainedModel, wh: Warehouse) -> list[LabeledSample]:
    test = trained.test
    out = []
    for row, score in zip(test.rows, test.scores):
        p = wh.patients[row.patient_id]
        attrs = {"sex": p.sex, "race": p.race,
                 "age_over_40": age_in_years(p.birth_date, row.inference_time) > AGE_SPLIT}
        out.append(LabeledSample(row.order_id, float(score), row.label, row.inference_time, attrs))
    return out


def save_samples(samples: Sequence[LabeledSample], path: Path) -> Path:
    return write_json(path, [{"id": s.packet_id, "score": s.score, "label": s.label,
                              "inference_time": format_ts(s.inference_time), "attributes": dict(s.attributes),
                              "weight": s.weight} for s in samples])


def load_samples(path: Path) -> list[LabeledSample]:
    return [LabeledSample(d["id"], float(d["score"]), bool(d["label"]), parse_ts(d["inference_time"]),
                          d["attributes"], float(d["weight"])) for d in read_json(path)]


def stage_train(wh: Warehouse, cohort: Cohort, cfg: TrialConfig, world_cfg: WorldConfig,
                out: Path) -> tuple[TrainedModel, dict[str, Path]]:
    created = parse_ts(f"{world_cfg.start_year + world_cfg.n_years}-01-01T00:00:00Z")
    trained = fit_model(wh, cohort, cfg.task.model_id, created, cfg.task.forest, cfg.task.train_seed)
    paths = {"bundle": save_bundle(trained.bundle, out / BUNDLE_FILE),
             "retrospective": save_samples(retrospective_samples(trained, wh), out / RETRO_FILE)}
    test = trained.test
    baseline = DriftBaseline.from_data([dict(v.entries) for v in test.vectors], test.scores, test.labels)
    paths["baseline"] = write_json(out / BASELINE_FILE, baseline.to_dict())
    return trained, paths


# ------------------------------------------------------------------ prospective
def sim_start(world_cfg: WorldConfig) -> datetime:
    return parse_ts(f"{world_cfg.start_year + world_cfg.n_years}-01-01T00:00:00Z")


def load_order_log(out: Path) -> list[dict[str, Any]]:
    p = out / ORDER_LOG_FILE
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line]


def save_order_log(world: World, out: Path) -> Path:
    p = out / ORDER_LOG_FILE
    p.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in world.order_log), encoding="utf-8")
    return p


def stage_run_sim(world: World, bundle: ModelBundle, cfg: TrialConfig, out: Path,
                  start: datetime | None = None) -> tuple[SimSummary, Stack]:
    start = start or sim_start(world.config)
    store_path = out / PACKETS_FILE
    if store_path.exists():
        store_path.unlink()
    stack = build_stack(world, store_path, start)
    stack.engine.register_deployment(bundle, cfg.trigger)
    s = cfg.sim
    summary = run_simulation(stack, start, s.duration, s.order_rates, s.seed, s.label_cron, s.maturation)
    write_json(out / SIM_FILE, summary.to_dict())
    write_json(out / SIM_WORLD_FILE, world.config.to_dict())
    save_order_log(world, out)
    return summary, stack


def rebuild_stack(world_cfg: WorldConfig, out: Path, now: datetime) -> Stack:
    """World regenerated from config with the logged prospective orders replayed."""
    world = generate_world(world_cfg)
    world.replay_orders(load_order_log(out))
    return build_stack(world, out / PACKETS_FILE, now)


def stage_extract_labels(cfg: TrialConfig, out: Path, now: datetime | None = None) -> ExtractionResult:
    """Pair stored packets with matured outcomes on a world rebuilt from the simulation's config."""
    if not (out / SIM_FILE).exists():
        raise StageError("extract-labels", f"{out / SIM_FILE} missing; run run-sim first")
    summary = read_json(out / SIM_FILE)
    if now is None:
        now = max(parse_ts(summary["end"]) + cfg.sim.maturation, parse_ts(summary["final_time"]))
    stack = rebuild_stack(load_world_config(out, SIM_WORLD_FILE), out, now)
    return extract_labels(stack.store, stack.emr, cfg.sim.maturation, now)


# ------------------------------------------------------------------ reporting
def drift_windows(start: datetime, end: datetime, width: timedelta) -> list[tuple[datetime, datetime]]:
    out = []
    t = start
    while t < end:
        out.append((t, min(t + width, end)))
        t += width
    return out


@dataclass
class TrialReports:
    retrospective: MetricReport | None
    prospective: MetricReport | None
    drift: list[DriftSnapshot]
    paths: dict[str, Path]


def stage_drift(out: Path, cfg: TrialConfig) -> list[DriftSnapshot]:
    """Drift snapshots over consecutive windows of the simulated span, flagged against the baseline."""
    if not ((out / PACKETS_FILE).exists() and (out / SIM_FILE).exists()):
        return []
    bundle = load_bundle(out / BUNDLE_FILE)
    baseline = DriftBaseline.from_dict(read_json(out / BASELINE_FILE))
    store = PacketStore(out / PACKETS_FILE)
    summary = read_json(out / SIM_FILE)
    start, end = parse_ts(summary["start"]), parse_ts(summary["end"])
    return [drift_snapshot(store, bundle.model_id, w, baseline, cfg.monitor.drift_k)
            for w in drift_windows(start, end, cfg.monitor.drift_window)]


def stage_report(out: Path, cfg: TrialConfig, dest: Path | None = None) -> TrialReports:
    bundle = load_bundle(out / BUNDLE_FILE)
    retro = load_samples(out / RETRO_FILE)
    m = cfg.monitor
    reports = [build_metric_report(bundle.model_id, "retrospective", retro, bundle.decision_threshold,
                                   B=m.bootstrap_b, seed=m.bootstrap_seed)]
    prospective = None
    if (out / PACKETS_FILE).exists() and (out / SIM_FILE).exists():
        store = PacketStore(out / PACKETS_FILE)
        summary = read_json(out / SIM_FILE)
        start, end = parse_ts(summary["start"]), parse_ts(summary["end"])
        samples = labeled_samples(store.read_packets(bundle.model_id))
        if samples:
            prospective = build_metric_report(bundle.model_id, "prospective", samples, bundle.decision_threshold,
                                              (start, end), B=m.bootstrap_b, seed=m.bootstrap_seed)
            reports.append(prospective)
    snapshots = stage_drift(out, cfg)
    paths = render_report(reports, snapshots, dest or out / "report", bundle.vocabulary.tokens)
    return TrialReports(reports[0], prospective, snapshots, paths)


# ------------------------------------------------------------------ parity
@dataclass
class ParityResult:
    n: int
    mismatches: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def parity_check(world: World, wh: Warehouse, n: int, seed: int, stack: Stack | None = None) -> ParityResult:
    """Compare warehouse and transactional feature vectors at random (patient, time) pairs.

    The vocabulary is fitted on the same random histories so that every
    numeric code has bin edges.
    """
    rng = np.random.default_rng([seed, 50])
    pids = sorted(wh.patients)
    lo, hi = to_epoch(world.retro_start), to_epoch(world.retro_end)
    pairs = [(pids[int(rng.integers(len(pids)))], from_epoch(int(rng.integers(lo, hi)))) for _ in range(n)]
    if stack is None:
        scratch = Path(tempfile.mkdtemp(prefix="emrdeploy-parity-"))
        stack = build_stack(world, scratch / PACKETS_FILE, world.retro_end)
    wh_hist = [load_history_warehouse(wh, p, t) for p, t in pairs]
    vocab = build_vocabulary(wh_hist)
    mismatches = []
    for (pid, t), h_wh in zip(pairs, wh_hist):
        h_tx = fetch_history_transactional(stack.emr, pid, t)
        if h_tx != h_wh or featurize(h_tx, vocab) != featurize(h_wh, vocab):
            mismatches.append((pid, format_ts(t)))
    return ParityResult(n, mismatches)


# ------------------------------------------------------------------ full trial
@dataclass
class TrialResult:
    config: TrialConfig
    trained: TrainedModel
    summary: SimSummary
    reports: TrialReports
    stack: Stack

    @property
    def retrospective_auroc(self) -> float:
        return self.reports.retrospective.auroc["point"] if self.reports.retrospective else math.nan

    @property
    def prospective_auroc(self) -> float:
        return self.reports.prospective.auroc["point"] if self.reports.prospective else math.nan


def run_trial(cfg: TrialConfig, out: str | Path, full_report: bool = True) -> TrialResult:
    """gen-world, export, cohort, train, deploy, simulate, extract labels, report.

    With ``full_report`` off only the drift snapshots are computed, which is
    what repeated control runs need.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest.open(out)
    cfg_path = out / "config.json"
    cfg.save(cfg_path)
    cfg_digest = file_digest(cfg_path)

    t = time.perf_counter()
    world, world_path = stage_world(cfg, out)
    manifest.record("gen-world", {"config": cfg_digest}, {"world": world_path}, time.perf_counter() - t,
                    extra={"world_digest": world_digest(world)})

    t = time.perf_counter()
    wh, wh_path = stage_warehouse(world, out)
    manifest.record("export-warehouse", {"world": file_digest(world_path)}, {"warehouse": wh_path},
                    time.perf_counter() - t, (world.start_time, world.retro_end))

    t = time.perf_counter()
    cohort = stage_cohort(wh, cfg, world.config)
    cohort_path = save_cohort(cohort, out / COHORT_FILE)
    manifest.record("build-cohort", {"warehouse": file_digest(wh_path)}, {"cohort": cohort_path},
                    time.perf_counter() - t, extra={"rows": len(cohort), "dropped": cohort.dropped_missing_result})

    t = time.perf_counter()
    trained, train_paths = stage_train(wh, cohort, cfg, world.config, out)
    manifest.record("train", {"cohort": file_digest(cohort_path)}, train_paths, time.perf_counter() - t)

    t = time.perf_counter()
    dep_path = write_json(out / DEPLOYMENT_FILE, {"bundle": BUNDLE_FILE, "trigger": cfg.trigger.to_dict()})
    summary, stack = stage_run_sim(world, trained.bundle, cfg, out)
    manifest.record("run-sim", {"bundle": file_digest(train_paths["bundle"]), "deployment": file_digest(dep_path)},
                    {"packets": out / PACKETS_FILE, "summary": out / SIM_FILE, "orders": out / ORDER_LOG_FILE},
                    time.perf_counter() - t, (parse_ts(summary.start), parse_ts(summary.final_time)))

    if not full_report:
        return TrialResult(cfg, trained, summary, TrialReports(None, None, stage_drift(out, cfg), {}), stack)
    t = time.perf_counter()
    reports = stage_report(out, cfg)
    manifest.record("report", {"packets": file_digest(out / PACKETS_FILE)}, reports.paths, time.perf_counter() - t)
    return TrialResult(cfg, trained, summary, reports, stack)
