"""Count-based featurization: vocabulary, quintile binning, bag-of-tokens vectors."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import timedelta
from typing import Any, Iterable, Mapping, Sequence

from ..hashing import fingerprint
from .history import LAB_WINDOW, LOOKBACK, MEDICATION_WINDOW, PatientHistory

VOCAB_FORMAT = "emrdeploy.vocabulary"
VOCAB_VERSION = 1
N_BINS = 5
AGE_CODE = "age"


class InvalidInput(ValueError):
    pass


def nearest_rank(sorted_values: Sequence[float], numerator: int, denominator: int) -> float:
    """Nearest-rank quantile q = numerator/denominator: the ceil(q*n)-th order statistic."""
    n = len(sorted_values)
    if n == 0:
        raise InvalidInput("quantile of an empty sample")
    k = max(1, -(-numerator * n // denominator))
    return sorted_values[min(k, n) - 1]


def quintile_edges(values: Iterable[float]) -> tuple[float, float, float, float]:
    vs = sorted(values)
    return tuple(nearest_rank(vs, i, N_BINS) for i in range(1, N_BINS))  # type: ignore[return-value]


def bin_numeric(value: float, edges: Sequence[float]) -> int:
    """Number of edges strictly below ``value``; ties at an edge go to the lower bin."""
    return sum(1 for e in edges if value > e)


@dataclass(frozen=True)
class FeatureVector:
    entries: Mapping[int, int]
    vocab_fingerprint: str
    oov_count: int = 0

    def to_pairs(self) -> list[list[int]]:
        return [[i, c] for i, c in sorted(self.entries.items())]


@dataclass(frozen=True)
class Vocabulary:
    token_to_index: Mapping[str, int]
    numeric_bin_edges: Mapping[str, tuple[float, ...]]
    windows: Mapping[str, int] = field(default_factory=lambda: {"medication_days": 28, "lab_days": 14})
    fingerprint: str = ""

    def __post_init__(self) -> None:
        idx = sorted(self.token_to_index.values())
        if idx != list(range(len(idx))):
            raise InvalidInput("vocabulary indices must be dense 0..V-1")
        for code, edges in self.numeric_bin_edges.items():
            if len(edges) != N_BINS - 1 or any(a > b for a, b in zip(edges, edges[1:])):
                raise InvalidInput(f"bad bin edges for {code!r}")
        if timedelta(days=max(self.windows.values())) > LOOKBACK:
            raise InvalidInput("feature windows exceed the history lookback")
        expected = fingerprint(self._content())
        if not self.fingerprint:
            object.__setattr__(self, "fingerprint", expected)
        elif self.fingerprint != expected:
            raise InvalidInput("vocabulary fingerprint does not match its contents")
        object.__setattr__(self, "_tokens", sorted(self.token_to_index, key=self.token_to_index.__getitem__))

    def __len__(self) -> int:
        return len(self.token_to_index)

    @property
    def tokens(self) -> list[str]:
        return self._tokens  # type: ignore[attr-defined]

    def _content(self) -> dict[str, Any]:
        return {
            "tokens": sorted(self.token_to_index, key=self.token_to_index.__getitem__),
            "edges": {k: list(v) for k, v in sorted(self.numeric_bin_edges.items())},
            "windows": dict(sorted(self.windows.items())),
        }

    def to_dict(self) -> dict[str, Any]:
        d = {"format": VOCAB_FORMAT, "version": VOCAB_VERSION, **self._content(), "fingerprint": self.fingerprint}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Vocabulary:
        if d.get("format") != VOCAB_FORMAT or d.get("version") != VOCAB_VERSION:
            raise InvalidInput(f"unsupported vocabulary document {d.get('format')!r} v{d.get('version')!r}")
        return cls(
            token_to_index={t: i for i, t in enumerate(d["tokens"])},
            numeric_bin_edges={k: tuple(float(x) for x in v) for k, v in d["edges"].items()},
            windows={k: int(v) for k, v in d["windows"].items()},
            fingerprint=d["fingerprint"],
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=None, separators=(",", ":"))

    @classmethod
    def load(cls, path: str | os.PathLike) -> Vocabulary:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _in_window(history: PatientHistory, when, days: int) -> bool:
    return history.inference_time - when <= timedelta(days=days)


def _categorical_tokens(history: PatientHistory, med_days: int) -> list[str]:
    tokens = [code for code, _ in history.conditions]
    tokens += [code for code, when in history.medications if _in_window(history, when, med_days)]
    tokens.append(f"sex_{history.demographics.sex}")
    tokens.append(f"race_{history.demographics.race}")
    return tokens


def build_vocabulary(histories: Sequence[PatientHistory],
                     medication_days: int = MEDICATION_WINDOW.days,
                     lab_days: int = LAB_WINDOW.days) -> Vocabulary:
    """Token space and quintile edges from training histories only."""
    if not histories:
        raise InvalidInput("cannot build a vocabulary from an empty training set")
    categorical: set[str] = set()
    numeric: dict[str, list[float]] = {AGE_CODE: []}
    for h in histories:
        categorical.update(_categorical_tokens(h, medication_days))
        numeric[AGE_CODE].append(h.demographics.age_at_inference)
        for code, value, when in h.labs:
            if _in_window(h, when, lab_days):
                numeric.setdefault(code, []).append(value)
    edges = {code: quintile_edges(vals) for code, vals in numeric.items()}
    tokens = set(categorical)
    for code in edges:
        tokens.update(f"{code}#{b}" for b in range(N_BINS))
    ordered = sorted(tokens)
    return Vocabulary({t: i for i, t in enumerate(ordered)}, edges,
                      {"medication_days": medication_days, "lab_days": lab_days})


def tokenize_history(history: PatientHistory, vocab: Vocabulary) -> list[str]:
    """Token multiset (as a list, repeats preserved) for one history."""
    tokens = _categorical_tokens(history, vocab.windows["medication_days"])
    age_edges = vocab.numeric_bin_edges.get(AGE_CODE)
    tokens.append(f"{AGE_CODE}#{bin_numeric(history.demographics.age_at_inference, age_edges)}"
                  if age_edges is not None else f"{AGE_CODE}#?")
    lab_days = vocab.windows["lab_days"]
    for code, value, when in history.labs:
        if not _in_window(history, when, lab_days):
            continue
        edges = vocab.numeric_bin_edges.get(code)
        tokens.append(f"{code}#{bin_numeric(value, edges)}" if edges is not None else f"{code}#?")
    return tokens


def vectorize(tokens: Iterable[str], vocab: Vocabulary) -> FeatureVector:
    counts: Counter[int] = Counter()
    oov = 0
    index = vocab.token_to_index
    for tok in tokens:
        i = index.get(tok)
        if i is None:
            oov += 1
        else:
            counts[i] += 1
    return FeatureVector(dict(sorted(counts.items())), vocab.fingerprint, oov)


def featurize(history: PatientHistory, vocab: Vocabulary) -> FeatureVector:
    return vectorize(tokenize_history(history, vocab), vocab)
