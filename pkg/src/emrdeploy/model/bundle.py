"""Deployable model bundle: vocabulary, classifier and operating point in one file.

The file is a versioned JSON envelope written with sorted keys and compact
separators, so writing a loaded bundle reproduces the original bytes. Three
fingerprints guard it: the vocabulary's, the classifier's and one over the
whole body.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..clock import format_ts, parse_ts
from ..features.vocab import FeatureVector, InvalidInput, Vocabulary
from ..hashing import canonical_json, fingerprint
from .forest import Forest

BUNDLE_FORMAT = "emrdeploy.bundle"
BUNDLE_VERSION = 1


class IntegrityError(ValueError):
    """A bundle file failed a named check."""

    def __init__(self, check: str, detail: str = ""):
        self.check = check
        super().__init__(f"bundle integrity check failed: {check}" + (f" ({detail})" if detail else ""))


class VocabularyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelBundle:
    model_id: str
    panel_code: str
    component_code: str
    vocabulary: Vocabulary
    forest: Forest
    decision_threshold: float
    created_at: datetime
    training_fingerprint: str

    def __post_init__(self) -> None:
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError(f"decision_threshold must lie in (0, 1), got {self.decision_threshold}")
        if len(self.vocabulary) != self.forest.n_features:
            raise VocabularyMismatch(
                f"vocabulary has {len(self.vocabulary)} tokens, forest expects {self.forest.n_features}")

    @property
    def vocab_fingerprint(self) -> str:
        return self.vocabulary.fingerprint

    def check_vector(self, x: FeatureVector) -> None:
        if x.vocab_fingerprint != self.vocabulary.fingerprint:
            raise VocabularyMismatch(
                f"vector built with vocabulary {x.vocab_fingerprint}, model {self.model_id} "
                f"expects {self.vocabulary.fingerprint}")

    def predict_proba(self, x: FeatureVector) -> float:
        self.check_vector(x)
        return self.forest.predict_row(x.entries)

    def predict_many(self, xs: list[FeatureVector]) -> np.ndarray:
        X = np.zeros((len(xs), self.forest.n_features), dtype=np.int32)
        for r, x in enumerate(xs):
            self.check_vector(x)
            for i, c in x.entries.items():
                X[r, i] = c
        return self.forest.predict_matrix(X)

    def _body(self) -> dict[str, Any]:
        forest = self.forest.to_dict()
        return {
            "model_id": self.model_id,
            "panel_code": self.panel_code,
            "component_code": self.component_code,
            "decision_threshold": self.decision_threshold,
            "created_at": format_ts(self.created_at),
            "training_fingerprint": self.training_fingerprint,
            "vocabulary": self.vocabulary.to_dict(),
            "classifier": forest,
            "classifier_fingerprint": fingerprint(forest),
        }

    def to_dict(self) -> dict[str, Any]:
        body = self._body()
        return {"format": BUNDLE_FORMAT, "version": BUNDLE_VERSION, "body": body,
                "fingerprint": fingerprint(body)}

    @property
    def fingerprint(self) -> str:
        return fingerprint(self._body())


def predict_proba(bundle: ModelBundle, x: FeatureVector) -> float:
    return bundle.predict_proba(x)


def bundle_bytes(bundle: ModelBundle) -> bytes:
    return canonical_json(bundle.to_dict()).encode("utf-8")


def save_bundle(bundle: ModelBundle, path: str | os.PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bundle_bytes(bundle))
    os.replace(tmp, path)
    return path


def bundle_from_dict(doc: Mapping[str, Any]) -> ModelBundle:
    if not isinstance(doc, Mapping) or doc.get("format") != BUNDLE_FORMAT:
        raise IntegrityError("format", f"expected {BUNDLE_FORMAT!r}")
    if doc.get("version") != BUNDLE_VERSION:
        raise IntegrityError("version", f"unsupported version {doc.get('version')!r}")
    body = doc.get("body")
    if not isinstance(body, Mapping):
        raise IntegrityError("body")
    if fingerprint(body) != doc.get("fingerprint"):
        raise IntegrityError("bundle-fingerprint")
    try:
        classifier = body["classifier"]
        if fingerprint(classifier) != body["classifier_fingerprint"]:
            raise IntegrityError("classifier-fingerprint")
        try:
            vocab = Vocabulary.from_dict(body["vocabulary"])
        except InvalidInput as exc:
            raise IntegrityError("vocabulary-fingerprint", str(exc)) from exc
        forest = Forest.from_dict(classifier)
        if forest.n_features != len(vocab):
            raise IntegrityError("feature-count", f"{forest.n_features} != {len(vocab)}")
        return ModelBundle(body["model_id"], body["panel_code"], body["component_code"], vocab, forest,
                           float(body["decision_threshold"]), parse_ts(body["created_at"]),
                           body["training_fingerprint"])
    except IntegrityError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError("schema", repr(exc)) from exc


def load_bundle(path: str | os.PathLike) -> ModelBundle:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IntegrityError("readable", str(exc)) from exc
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError("json", str(exc)) from exc
    return bundle_from_dict(doc)
