from .bootstrap import BootstrapCI, bootstrap_ci, percentile_ranks
from .drift import DEFAULT_K, DriftBaseline, DriftSnapshot, drift_flag, drift_snapshot, snapshot_from_packets
from .labels import ExtractionResult, LabeledSample, LabResultExtractor, extract_labels, labeled_samples
from .metrics import (DegenerateCurveError, auroc, average_precision, calibration_bins, confusion_at_threshold,
                      curves, net_benefit, pr_curve, prevalence, roc_curve)
from .report import (MetricReport, build_metric_report, load_metrics, metrics_document, render_report,
                     subgroup_metrics)

__all__ = [
    "BootstrapCI", "bootstrap_ci", "percentile_ranks", "DEFAULT_K", "DriftBaseline", "DriftSnapshot",
    "drift_flag", "drift_snapshot", "snapshot_from_packets", "ExtractionResult", "LabeledSample",
    "LabResultExtractor", "extract_labels", "labeled_samples", "DegenerateCurveError", "auroc",
    "average_precision", "calibration_bins", "confusion_at_threshold", "curves", "net_benefit", "pr_curve",
    "prevalence", "roc_curve", "MetricReport", "build_metric_report", "load_metrics", "metrics_document",
    "render_report", "subgroup_metrics",
]
