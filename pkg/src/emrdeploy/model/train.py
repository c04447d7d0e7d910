"""End-to-end retrospective fit: cohort histories to a validated ModelBundle."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from ..emr.warehouse import Warehouse
from ..features.history import PatientHistory, load_history_warehouse
from ..features.vocab import FeatureVector, Vocabulary, build_vocabulary, featurize
from ..hashing import fingerprint
from .bundle import ModelBundle
from .cohort import TEST, TRAIN, VALIDATION, Cohort, CohortRow
from .forest import ForestParams, to_matrix, train_forest
from .threshold import select_threshold

log = logging.getLogger(__name__)


@dataclass
class SplitData:
    rows: list[CohortRow]
    histories: list[PatientHistory]
    vectors: list[FeatureVector]
    scores: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=bool)


@dataclass
class TrainedModel:
    bundle: ModelBundle
    splits: dict[str, SplitData]

    @property
    def test(self) -> SplitData:
        return self.splits[TEST]


def cohort_histories(warehouse: Warehouse, rows: list[CohortRow]) -> list[PatientHistory]:
    return [load_history_warehouse(warehouse, r.patient_id, r.inference_time) for r in rows]


def training_fingerprint(cohort: Cohort, params: ForestParams, seed: int) -> str:
    used = [[r.order_id, r.component_code, r.label, r.split] for r in cohort.rows if r.split != TEST]
    return fingerprint({"rows": used, "params": params.to_dict(), "seed": seed})


def fit_model(warehouse: Warehouse, cohort: Cohort, model_id: str, created_at: datetime,
              params: ForestParams = ForestParams(), seed: int = 0) -> TrainedModel:
    """Vocabulary and forest from Train, threshold from Validation, scores on every split.

    Test rows are featurized only after the vocabulary and forest are frozen.
    """
    if not cohort.rows:
        raise ValueError("empty cohort")
    first = cohort.rows[0]
    by_split = {s: cohort.split(s) for s in (TRAIN, VALIDATION, TEST)}
    train_hist = cohort_histories(warehouse, by_split[TRAIN])
    vocab: Vocabulary = build_vocabulary(train_hist)
    train_vecs = [featurize(h, vocab) for h in train_hist]
    y = [r.label for r in by_split[TRAIN]]
    forest = train_forest(to_matrix(train_vecs, len(vocab)), y, params, seed)
    log.info("trained %s: %d trees on %d rows, %d features", model_id, params.n_trees, len(y), len(vocab))

    splits = {TRAIN: SplitData(by_split[TRAIN], train_hist, train_vecs,
                               forest.predict_matrix(to_matrix(train_vecs, len(vocab))))}
    for name in (VALIDATION, TEST):
        hist = cohort_histories(warehouse, by_split[name])
        vecs = [featurize(h, vocab) for h in hist]
        splits[name] = SplitData(by_split[name], hist, vecs, forest.predict_matrix(to_matrix(vecs, len(vocab))))

    val = splits[VALIDATION]
    threshold = select_threshold(val.scores, val.labels)
    bundle = ModelBundle(model_id, first.panel_code, first.component_code, vocab, forest, threshold,
                         created_at, training_fingerprint(cohort, params, seed))
    return TrainedModel(bundle, splits)
