"""Count-based featurization with warehouse and transactional adapters."""

from .history import (
    LAB_WINDOW,
    LOOKBACK,
    MEDICATION_WINDOW,
    Demographics,
    PatientHistory,
    fetch_history_transactional,
    load_history_warehouse,
    make_history,
)
from .vocab import (
    FeatureVector,
    InvalidInput,
    Vocabulary,
    bin_numeric,
    build_vocabulary,
    featurize,
    nearest_rank,
    quintile_edges,
    tokenize_history,
    vectorize,
)

__all__ = [
    "LAB_WINDOW",
    "LOOKBACK",
    "MEDICATION_WINDOW",
    "Demographics",
    "FeatureVector",
    "InvalidInput",
    "PatientHistory",
    "Vocabulary",
    "bin_numeric",
    "build_vocabulary",
    "featurize",
    "fetch_history_transactional",
    "load_history_warehouse",
    "make_history",
    "nearest_rank",
    "quintile_edges",
    "tokenize_history",
    "vectorize",
]
