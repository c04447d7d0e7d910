from .bundle import (IntegrityError, ModelBundle, VocabularyMismatch, bundle_bytes, load_bundle, predict_proba,
                     save_bundle)
from .cohort import SPLITS, TEST, TRAIN, VALIDATION, Cohort, CohortRow, InvalidTask, build_cohort
from .forest import DegenerateLabels, Forest, ForestParams, Tree, gini, gini_decrease, to_matrix, train_forest
from .threshold import select_threshold, youden_cuts
from .train import TrainedModel, fit_model

__all__ = [
    "IntegrityError", "ModelBundle", "VocabularyMismatch", "bundle_bytes", "load_bundle", "predict_proba",
    "save_bundle", "SPLITS", "TEST", "TRAIN", "VALIDATION", "Cohort", "CohortRow", "InvalidTask",
    "build_cohort", "DegenerateLabels", "Forest", "ForestParams", "Tree", "gini", "gini_decrease",
    "to_matrix", "train_forest", "select_threshold", "youden_cuts", "TrainedModel", "fit_model",
]
