"""Metric reports and their JSON/HTML renderings."""

from __future__ import annotations

import html
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from ..clock import format_ts
from .bootstrap import BootstrapCI, bootstrap_ci
from .drift import DriftSnapshot
from .labels import LabeledSample
from .metrics import (DegenerateCurveError, auroc, average_precision, calibration_bins, confusion_at_threshold,
                      default_pt_grid, net_benefit, pr_curve, prevalence, roc_curve)

METRICS_FORMAT = "emrdeploy.metrics"
METRICS_VERSION = 1
GROUPINGS = ("sex", "race", "age_over_40")


def ci_dict(ci: BootstrapCI) -> dict[str, float]:
    """Interval as reported: the bounds are widened to contain the point estimate if needed."""
    lo, hi = ci.lo, ci.hi
    if not math.isnan(ci.point):
        lo = lo if math.isnan(lo) else min(lo, ci.point)
        hi = hi if math.isnan(hi) else max(hi, ci.point)
    return {"lo": lo, "point": ci.point, "hi": hi, "n_nan": ci.n_nan}


def subgroup_metrics(samples: Sequence[LabeledSample], groupings: Sequence[str] = GROUPINGS,
                     B: int = 1000, seed: int = 0) -> list[dict[str, Any]]:
    """Full-cohort row plus one row per observed value of each grouping; single-class groups are NaN."""
    def row(grouping: str, group: str, members: Sequence[LabeledSample]) -> dict[str, Any]:
        s = [x.score for x in members]
        y = [x.label for x in members]
        w = [x.weight for x in members]
        return {"grouping": grouping, "group": group, "n": len(members), "n_positive": int(sum(y)),
                "auroc": ci_dict(bootstrap_ci(auroc, s, y, w, B=B, seed=seed))}

    rows = [row("all", "all", samples)] if samples else []
    for g in groupings:
        groups: dict[str, list[LabeledSample]] = {}
        for x in samples:
            groups.setdefault(str(x.attributes.get(g, "Unknown")), []).append(x)
        rows.extend(row(g, value, groups[value]) for value in sorted(groups))
    return rows


@dataclass
class MetricReport:
    model_id: str
    name: str
    window: tuple[str, str] | None
    n: int
    threshold: float
    prevalence: dict[str, float]
    auroc: dict[str, float]
    average_precision: dict[str, float]
    at_threshold: dict[str, float]
    roc: list[list[float]]
    pr: list[list[float]]
    calibration: list[dict[str, Any]]
    net_benefit: list[dict[str, float]]
    subgroups: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["window"] = list(self.window) if self.window else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetricReport:
        d = dict(d)
        d["window"] = tuple(d["window"]) if d.get("window") else None
        return cls(**d)


def build_metric_report(model_id: str, name: str, samples: Sequence[LabeledSample], threshold: float,
                        window: tuple[datetime, datetime] | None = None, B: int = 1000, seed: int = 0,
                        pt_grid: Sequence[float] | None = None,
                        groupings: Sequence[str] = GROUPINGS) -> MetricReport:
    if not samples:
        raise ValueError(f"no labeled samples for report {name!r}")
    s = np.array([x.score for x in samples])
    y = np.array([x.label for x in samples], dtype=bool)
    w = np.array([x.weight for x in samples])
    try:
        roc = [list(p) for p in roc_curve(s, y, w)]
        pr = [list(p) for p in pr_curve(s, y, w)]
    except DegenerateCurveError:
        roc, pr = [], []
    return MetricReport(
        model_id=model_id, name=name,
        window=(format_ts(window[0]), format_ts(window[1])) if window else None,
        n=len(samples), threshold=threshold,
        prevalence=ci_dict(bootstrap_ci(prevalence, s, y, w, B=B, seed=seed)),
        auroc=ci_dict(bootstrap_ci(auroc, s, y, w, B=B, seed=seed)),
        average_precision=ci_dict(bootstrap_ci(average_precision, s, y, w, B=B, seed=seed)),
        at_threshold=confusion_at_threshold(s, y, threshold, w),
        roc=roc, pr=pr,
        calibration=[asdict(b) for b in calibration_bins(s, y, w)],
        net_benefit=net_benefit(s, y, pt_grid or default_pt_grid(), w),
        subgroups=subgroup_metrics(samples, groupings, B=B, seed=seed),
    )


def metrics_document(reports: Sequence[MetricReport], drift: Sequence[DriftSnapshot],
                     tokens: Sequence[str] | None = None) -> dict[str, Any]:
    return {"format": METRICS_FORMAT, "version": METRICS_VERSION,
            "reports": [r.to_dict() for r in reports],
            "drift": [d.to_dict(tokens) for d in drift]}


def dump_metrics(doc: Mapping[str, Any]) -> str:
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=True)


def load_metrics(text: str) -> tuple[list[MetricReport], list[dict[str, Any]]]:
    doc = json.loads(text)
    if doc.get("format") != METRICS_FORMAT or doc.get("version") != METRICS_VERSION:
        raise ValueError("not a metrics document")
    return [MetricReport.from_dict(r) for r in doc["reports"]], doc["drift"]


# ---------------------------------------------------------------- HTML / SVG
_PLOT = 240
_PAD = 30


def _fmt(x: Any) -> str:
    if isinstance(x, float):
        return "NaN" if math.isnan(x) else f"{x:.3f}"
    return html.escape(str(x))


def _ci_text(ci: Mapping[str, float]) -> str:
    return f"{_fmt(ci['point'])} [{_fmt(ci['lo'])}, {_fmt(ci['hi'])}]"


def svg_plot(title: str, css_class: str, points: Sequence[Sequence[float]], xlabel: str, ylabel: str,
             diagonal: bool = False) -> str:
    """Unit-square line plot; one polyline vertex per point."""
    size = _PLOT + 2 * _PAD

    def xy(px: float, py: float) -> str:
        return f"{_PAD + px * _PLOT:.2f},{_PAD + (1 - py) * _PLOT:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}" role="img" aria-label="{html.escape(title)}">',
             f'<rect x="{_PAD}" y="{_PAD}" width="{_PLOT}" height="{_PLOT}" fill="none" stroke="#999"/>',
             f'<text x="{size / 2}" y="16" text-anchor="middle" font-size="12">{html.escape(title)}</text>',
             f'<text x="{size / 2}" y="{size - 6}" text-anchor="middle" font-size="10">{html.escape(xlabel)}</text>',
             f'<text x="10" y="{size / 2}" font-size="10" transform="rotate(-90 10 {size / 2})" '
             f'text-anchor="middle">{html.escape(ylabel)}</text>']
    if diagonal:
        parts.append(f'<line x1="{_PAD}" y1="{_PAD + _PLOT}" x2="{_PAD + _PLOT}" y2="{_PAD}" '
                     f'stroke="#ccc" stroke-dasharray="4 3"/>')
    if points:
        pts = " ".join(xy(p[0], p[1]) for p in points)
        parts.append(f'<polyline class="{css_class}" fill="none" stroke="#1f5fa8" stroke-width="1.5" '
                     f'points="{pts}"/>')
    else:
        parts.append(f'<text x="{size / 2}" y="{size / 2}" text-anchor="middle" font-size="11">undefined</text>')
    parts.append("</svg>")
    return "".join(parts)


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]], css_class: str = "") -> str:
    head = "".join(f"<th>{html.escape(h)}</th>" for h in header)
    body = "".join("<tr>" + "".join(f"<td>{c if isinstance(c, _Raw) else _fmt(c)}</td>" for c in r) + "</tr>"
                   for r in rows)
    return f'<table class="{css_class}"><thead><tr>{head}</tr></thead><tbody>{body}</tbody></table>'


class _Raw(str):
    pass


def _report_section(r: MetricReport) -> str:
    window = f"{r.window[0]} to {r.window[1]}" if r.window else "retrospective test split"
    summary = _table(["quantity", "value"], [
        ["n", r.n], ["prevalence", _Raw(_ci_text(r.prevalence))], ["AUROC", _Raw(_ci_text(r.auroc))],
        ["average precision", _Raw(_ci_text(r.average_precision))], ["threshold", r.threshold],
        *[[k, r.at_threshold[k]] for k in ("accuracy", "sensitivity", "specificity", "ppv")],
    ], "summary")
    calib = [[b["mean_score"], b["frac_positive"]] for b in r.calibration]
    plots = "".join([
        svg_plot("ROC", "roc", r.roc, "false positive rate", "true positive rate", diagonal=True),
        svg_plot("Precision-recall", "pr", r.pr, "recall", "precision"),
        svg_plot("Calibration", "calibration", calib, "mean score", "fraction positive", diagonal=True),
    ])
    sub = _table(["grouping", "group", "n", "positives", "AUROC [95% CI]"],
                 [[g["grouping"], g["group"], g["n"], g["n_positive"], _Raw(_ci_text(g["auroc"]))]
                  for g in r.subgroups], "subgroups")
    nb = _table(["pt", "model", "treat all", "treat none"],
                [[p["pt"], p["model"], p["treat_all"], p["treat_none"]] for p in r.net_benefit], "net-benefit")
    return (f'<section class="report"><h2>{html.escape(r.model_id)}: {html.escape(r.name)}</h2>'
            f"<p>{html.escape(window)}</p>{summary}<div class=\"plots\">{plots}</div>"
            f"<h3>Subgroups</h3>{sub}<h3>Net benefit</h3>{nb}</section>")


def _drift_section(drift: Sequence[DriftSnapshot], tokens: Sequence[str] | None) -> str:
    def name(q: str) -> str:
        if q.startswith("feature:") and tokens is not None:
            i = int(q.split(":", 1)[1])
            return f"{q} ({tokens[i]})" if i < len(tokens) else q
        return q

    rows = [[d.model_id, f"{format_ts(d.window[0])} to {format_ts(d.window[1])}", d.n, d.prediction_mean,
             d.label_mean, len(d.flags), ", ".join(f"{name(q)} z={z:.1f}" for q, z in d.flags[:20])]
            for d in drift]
    return "<section class=\"drift\"><h2>Distribution drift</h2>" + _table(
        ["model", "window", "n", "prediction mean", "label mean", "flags", "flagged quantities"], rows,
        "drift") + "</section>"


def render_html(reports: Sequence[MetricReport], drift: Sequence[DriftSnapshot],
                tokens: Sequence[str] | None = None) -> str:
    style = ("body{font-family:sans-serif;margin:2em}table{border-collapse:collapse;margin:.5em 0}"
             "td,th{border:1px solid #ccc;padding:2px 6px;font-size:12px}.plots svg{margin-right:1em}")
    body = "".join(_report_section(r) for r in reports) + _drift_section(drift, tokens)
    return (f"<!DOCTYPE html><html><head><meta charset=\"utf-8\"><title>Model monitoring report</title>"
            f"<style>{style}</style></head><body><h1>Model monitoring report</h1>{body}</body></html>\n")


def render_report(reports: Sequence[MetricReport], drift: Sequence[DriftSnapshot], dest: str | os.PathLike,
                  tokens: Sequence[str] | None = None) -> dict[str, Path]:
    if not reports:
        raise ValueError("render_report needs at least one metric report")
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    paths = {"json": dest / "metrics.json", "html": dest / "report.html"}
    paths["json"].write_text(dump_metrics(metrics_document(reports, drift, tokens)), encoding="utf-8")
    paths["html"].write_text(render_html(reports, drift, tokens), encoding="utf-8")
    return paths
