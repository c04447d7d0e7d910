"""Command-line entry point: one subcommand per trial stage, plus a one-shot demo.

Stages communicate through files under ``--out``. The effective trial config
is written to ``<out>/config.json`` by every stage and read back by the next,
so a sequence of subcommands behaves like a single run. On success each
subcommand prints one JSON line; on failure it prints one line
``emrdeploy: error stage=<stage> <message>`` to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

from . import __version__
from .clock import PacedClock, format_ts, parse_duration, parse_ts
from .config import TrialConfig
from .emr.warehouse import export_warehouse, load_warehouse
from .emr.world import World, generate_world
from .model.bundle import ModelBundle, load_bundle
from .model.cohort import TEST, TRAIN, VALIDATION
from .serve.engine import LOUD, SILENT, TriggerConfig
from .sim import SimSummary, build_http_stack, run_simulation
from .trial import (BUNDLE_FILE, COHORT_FILE, DEPLOYMENT_FILE, ORDER_LOG_FILE, PACKETS_FILE, SIM_FILE,
                    SIM_WORLD_FILE, RunManifest, StageError, file_digest, load_cohort, load_world_config,
                    parity_check, prospective_world_config, read_json, run_trial, save_cohort, save_order_log,
                    sim_start, stage_cohort, stage_extract_labels, stage_report, stage_run_sim, stage_train,
                    stage_warehouse, stage_world, write_json)

log = logging.getLogger("emrdeploy")

CONFIG_FILE = "config.json"
WAREHOUSE_DIR = "warehouse"


# ------------------------------------------------------------------ config
def effective_config(args: argparse.Namespace) -> TrialConfig:
    """--config, else the run directory's config, else defaults; then --seed and stage flags."""
    out = Path(args.out)
    if args.config:
        cfg = TrialConfig.load(args.config)
    elif (out / CONFIG_FILE).exists():
        cfg = TrialConfig.load(out / CONFIG_FILE)
    else:
        cfg = TrialConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    sim = cfg.sim
    if getattr(args, "duration", None):
        sim = replace(sim, duration=parse_duration(args.duration))
    if getattr(args, "rate", None) is not None:
        sim = replace(sim, order_rates={cfg.task.panel_code: args.rate})
    if getattr(args, "drift_at", None):
        sim = replace(sim, drift_at=parse_duration(args.drift_at))
    if getattr(args, "mode", None):
        cfg = replace(cfg, trigger=replace(cfg.trigger, mode=args.mode))
    return replace(cfg, sim=sim)


def _need(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"{path} missing; run {producer} first")
    return path


# ------------------------------------------------------------------ subcommands
def cmd_gen_world(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    world, path = stage_world(cfg, out)
    digest = read_json(out / "world_digest.json")
    manifest.record("gen-world", {"config": file_digest(out / CONFIG_FILE)}, {"world": path},
                    time.perf_counter() - t, extra={"world_digest": digest["digest"]})
    return {"patients": len(world.patients), "events": digest["n_events"], "orders": len(world.orders),
            "world_digest": digest["digest"]}


def cmd_export_warehouse(args: argparse.Namespace, cfg: TrialConfig, out: Path,
                         manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    world = generate_world(load_world_config(out))
    up_to = parse_ts(args.up_to) if args.up_to else world.retro_end
    dest = out / WAREHOUSE_DIR
    files = export_warehouse(world, up_to, dest)
    manifest.record("export-warehouse", {"world": file_digest(out / "world.json")}, {"warehouse": dest},
                    time.perf_counter() - t, (world.start_time, up_to))
    return {"up_to": format_ts(up_to), "tables": sorted(files), "warehouse": str(dest)}


def cmd_build_cohort(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    wh = load_warehouse(_need(out / WAREHOUSE_DIR, "build-cohort", "export-warehouse"))
    cohort = stage_cohort(wh, cfg, load_world_config(out))
    path = save_cohort(cohort, out / COHORT_FILE)
    manifest.record("build-cohort", {"warehouse": file_digest(out / WAREHOUSE_DIR)}, {"cohort": path},
                    time.perf_counter() - t, extra={"rows": len(cohort), "dropped": cohort.dropped_missing_result})
    return {"rows": len(cohort), "dropped_missing_result": cohort.dropped_missing_result,
            "splits": {name: len(cohort.split(name)) for name in (TRAIN, VALIDATION, TEST)}}


def cmd_train(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    wh = load_warehouse(_need(out / WAREHOUSE_DIR, "train", "export-warehouse"))
    cohort = load_cohort(_need(out / COHORT_FILE, "train", "build-cohort"))
    trained, paths = stage_train(wh, cohort, cfg, load_world_config(out), out)
    manifest.record("train", {"cohort": file_digest(out / COHORT_FILE)}, paths, time.perf_counter() - t)
    b = trained.bundle
    return {"model_id": b.model_id, "n_features": b.forest.n_features, "threshold": b.decision_threshold,
            "bundle_fingerprint": b.fingerprint}


def cmd_deploy(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    bundle = load_bundle(_need(out / BUNDLE_FILE, "deploy", "train"))
    path = write_json(out / DEPLOYMENT_FILE, {"bundle": BUNDLE_FILE, "trigger": cfg.trigger.to_dict()})
    manifest.record("deploy", {"bundle": file_digest(out / BUNDLE_FILE)}, {"deployment": path}, 0.0)
    info = {"model_id": bundle.model_id, "deployment": str(path), "mode": cfg.trigger.mode}
    if not args.serve:
        return info
    world = generate_world(prospective_world_config(out, cfg))
    clock = PacedClock(sim_start(world.config), args.speed)
    stack = build_http_stack(world, out / PACKETS_FILE, clock, args.host, args.emr_port, args.serve_port)
    try:
        stack.engine.register_deployment(bundle, cfg.trigger)
        print(json.dumps({"emr": stack.emr.base_url, "serve": stack.engine.base_url,
                          "model_id": bundle.model_id}), flush=True)
        deadline = time.monotonic() + args.serve_for if args.serve_for else None
        try:
            while deadline is None or time.monotonic() < deadline:
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
    finally:
        stack.close()
        save_order_log(world, out)
    info["packets"] = stack.store.record_counts()["packet"]
    return info


def cmd_run_sim(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    deployment = read_json(_need(out / DEPLOYMENT_FILE, "run-sim", "deploy"))
    bundle = load_bundle(out / deployment["bundle"])
    trigger = TriggerConfig.from_dict(deployment["trigger"])
    if args.mode:
        trigger = replace(trigger, mode=args.mode)
    cfg = replace(cfg, trigger=trigger)
    world = generate_world(prospective_world_config(out, cfg))
    if args.wall_clock:
        summary = _run_paced(world, bundle, cfg, out, args.speed)
    else:
        summary, stack = stage_run_sim(world, bundle, cfg, out)
    manifest.record("run-sim", {"bundle": file_digest(out / BUNDLE_FILE),
                                "deployment": file_digest(out / DEPLOYMENT_FILE)},
                    {"packets": out / PACKETS_FILE, "summary": out / SIM_FILE, "orders": out / ORDER_LOG_FILE},
                    time.perf_counter() - t, (parse_ts(summary.start), parse_ts(summary.final_time)))
    return summary.to_dict()


def _run_paced(world: World, bundle: ModelBundle, cfg: TrialConfig, out: Path, speed: float) -> SimSummary:
    """Real sockets and a paced clock; labels are left to ``extract-labels``."""
    start = sim_start(world.config)
    store_path = out / PACKETS_FILE
    if store_path.exists():
        store_path.unlink()
    stack = build_http_stack(world, store_path, PacedClock(start, speed))
    try:
        stack.engine.register_deployment(bundle, cfg.trigger)
        s = cfg.sim
        summary = run_simulation(stack, start, s.duration, s.order_rates, s.seed, s.label_cron, s.maturation,
                                 final_extraction=False)
    finally:
        stack.close()
    write_json(out / SIM_FILE, summary.to_dict())
    write_json(out / SIM_WORLD_FILE, world.config.to_dict())
    save_order_log(world, out)
    return summary


def cmd_extract_labels(args: argparse.Namespace, cfg: TrialConfig, out: Path,
                       manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    now = parse_ts(args.now) if args.now else None
    res = stage_extract_labels(cfg, out, now)
    manifest.record("extract-labels", {"orders": file_digest(_need(out / ORDER_LOG_FILE, "extract-labels",
                                                                      "run-sim"))},
                    {"packets": out / PACKETS_FILE}, time.perf_counter() - t)
    return {"labeled": res.labeled, "pending": res.pending, "immature": res.immature, "errors": res.errors,
            "not_applicable": res.not_applicable}


def cmd_report(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    _need(out / BUNDLE_FILE, "report", "train")
    dest = Path(args.dest) if args.dest else None
    reports = stage_report(out, cfg, dest)
    inputs = {"bundle": file_digest(out / BUNDLE_FILE)}
    if (out / PACKETS_FILE).exists():
        inputs["packets"] = file_digest(out / PACKETS_FILE)
    manifest.record("report", inputs, reports.paths, time.perf_counter() - t)
    info: dict[str, Any] = {"retrospective_auroc": reports.retrospective.auroc,
                            "files": {k: str(v) for k, v in reports.paths.items()}}
    if reports.prospective is not None:
        info["prospective_auroc"] = reports.prospective.auroc
    info["drift_flags"] = [[format_ts(d.window[0]), q, round(z, 3)] for d in reports.drift for q, z in d.flags]
    return info


def cmd_parity_check(args: argparse.Namespace, cfg: TrialConfig, out: Path,
                     manifest: RunManifest) -> dict[str, Any]:
    if (out / "world.json").exists():
        world = generate_world(load_world_config(out))
    else:
        world, _ = stage_world(cfg, out)
    wh_dir = out / WAREHOUSE_DIR
    if wh_dir.exists():
        wh = load_warehouse(wh_dir)
        result = parity_check(world, wh, args.n, cfg.world.seed)
    else:
        with tempfile.TemporaryDirectory(prefix="emrdeploy-wh-") as tmp:
            export_warehouse(world, world.retro_end, tmp)
            result = parity_check(world, load_warehouse(tmp), args.n, cfg.world.seed)
    if not result.ok:
        pid, ts = result.mismatches[0]
        raise StageError("parity-check", f"{len(result.mismatches)}/{result.n} pairs differ (first {pid} at {ts})")
    return {"pairs": result.n, "mismatches": 0}


def cmd_demo(args: argparse.Namespace, cfg: TrialConfig, out: Path, manifest: RunManifest) -> dict[str, Any]:
    t = time.perf_counter()
    res = run_trial(cfg, out)
    writebacks = sum(len(v) for v in res.stack.world.writeback_logs.values())
    return {"packets": res.summary.packets, "callbacks_delivered": res.summary.callbacks_delivered,
            "labels": res.summary.labels_appended, "writebacks": writebacks,
            "retrospective_auroc": res.retrospective_auroc, "prospective_auroc": res.prospective_auroc,
            "drift_flags": sum(len(d.flags) for d in res.reports.drift),
            "metrics": str(res.reports.paths["json"]), "wall_seconds": round(time.perf_counter() - t, 1)}


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed; derives every other seed")
    common.add_argument("--config", default=None, help="trial config JSON (default: <out>/config.json)")
    common.add_argument("--out", default="run", help="run directory shared by all stages")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="emrdeploy", description="Train, deploy and monitor models "
                                     "against a simulated EMR.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name: str, fn: Callable, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    add("gen-world", cmd_gen_world, "generate the simulated world and record its config")
    p = add("export-warehouse", cmd_export_warehouse, "write the warehouse tables")
    p.add_argument("--up-to", default=None, help="export facts up to this RFC3339 time (default: end of history)")
    add("build-cohort", cmd_build_cohort, "sample the per-year training cohort")
    add("train", cmd_train, "fit the model and write the bundle")
    p = add("deploy", cmd_deploy, "write the deployment; with --serve, host it over HTTP")
    p.add_argument("--mode", choices=(SILENT, LOUD), default=None)
    p.add_argument("--serve", action="store_true", help="serve the EMR and the engine on real sockets")
    p.add_argument("--serve-for", type=float, default=None, help="stop serving after this many seconds")
    p.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second while serving")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--emr-port", type=int, default=0)
    p.add_argument("--serve-port", type=int, default=0)
    p = add("run-sim", cmd_run_sim, "drive order arrivals, triggers and label extraction")
    p.add_argument("--duration", default=None, help="simulated span, e.g. 30d")
    p.add_argument("--rate", type=float, default=None, help="orders per day for the model's panel")
    p.add_argument("--mode", choices=(SILENT, LOUD), default=None)
    p.add_argument("--drift-at", default=None, help="inject the configured drift this long after the start")
    p.add_argument("--wall-clock", action="store_true", help="real sockets and a paced clock")
    p.add_argument("--speed", type=float, default=1.0, help="simulated seconds per wall second (--wall-clock)")
    p = add("extract-labels", cmd_extract_labels, "pair stored packets with matured outcomes")
    p.add_argument("--now", default=None, help="extraction time (default: end of simulation plus maturation)")
    p = add("report", cmd_report, "write the metrics JSON and the HTML report")
    p.add_argument("--dest", default=None, help="report directory (default: <out>/report)")
    p = add("parity-check", cmd_parity_check, "compare warehouse and live feature vectors")
    p.add_argument("--n", type=int, default=1000, help="number of random (patient, time) pairs")
    add("demo", cmd_demo, "run every stage end to end as a silent trial")
    return parser


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    out = Path(args.out)
    try:
        cfg = effective_config(args)
        out.mkdir(parents=True, exist_ok=True)
        if stage != "demo":
            cfg.save(out / CONFIG_FILE)
        manifest = RunManifest.open(out)
        info = args.func(args, cfg, out, manifest)
    except Exception as exc:  # noqa: BLE001 - every stage failure becomes one line and exit 1
        log.debug("stage %s failed", stage, exc_info=True)
        detail = exc.message if isinstance(exc, StageError) else f"{type(exc).__name__}: {exc}"
        print(f"emrdeploy: error stage={stage} {_one_line(detail)}", file=sys.stderr)
        return 1
    print(json.dumps({"stage": stage, "ok": True, **info}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
