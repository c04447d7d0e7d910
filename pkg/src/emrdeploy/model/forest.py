"""Random forest over integer count features.

Each tree is grown on a bootstrap sample (kept as per-row multiplicities) by
recursive best Gini-decrease splits over ``mtry`` randomly drawn candidate
features. A node routes right iff ``count > threshold``; leaves store the
bootstrap-weighted positive fraction. Tree ``i`` draws from a generator keyed
by ``(seed, i)``, so growth is deterministic and order-independent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from ..features.vocab import FeatureVector


class DegenerateLabels(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 5
    mtry: int | None = None  # None: floor(sqrt(n_features))
    bootstrap: bool = True

    def resolved_mtry(self, n_features: int) -> int:
        m = self.mtry if self.mtry is not None else math.isqrt(n_features)
        return max(1, min(m, n_features))

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> ForestParams:
        return cls(**dict(d))


def gini(positive: float, total: float) -> float:
    if total <= 0:
        return 0.0
    p = positive / total
    return 2.0 * p * (1.0 - p)


def gini_decrease(pos: float, total: float, left_pos: float, left_total: float) -> float:
    """Impurity of the parent minus the size-weighted impurity of the two children."""
    right_pos, right_total = pos - left_pos, total - left_total
    children = (left_total * gini(left_pos, left_total) + right_total * gini(right_pos, right_total)) / total
    return gini(pos, total) - children


@dataclass
class Tree:
    feature: np.ndarray  # int32, -1 marks a leaf
    threshold: np.ndarray  # int32
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64 positive fraction (meaningful at leaves)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of the dense count matrix ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            fi = np.where(inner, f, 0)
            go_right = X[rows, fi] > self.threshold[node]
            nxt = np.where(go_right, self.right[node], self.left[node])
            node = np.where(inner, nxt, node)

    def leaf_value(self, counts: Mapping[int, int]) -> float:
        """Leaf fraction for one sparse row, walking plain lists (fast for single rows)."""
        lists = self.__dict__.get("_lists")
        if lists is None:
            lists = self.__dict__["_lists"] = (self.feature.tolist(), self.threshold.tolist(),
                                               self.left.tolist(), self.right.tolist(), self.value.tolist())
        feature, threshold, left, right, value = lists
        node = 0
        while feature[node] >= 0:
            node = right[node] if counts.get(feature[node], 0) > threshold[node] else left[node]
        return value[node]

    def to_dict(self) -> dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence]) -> Tree:
        return cls(
            np.asarray(d["feature"], dtype=np.int32),
            np.asarray(d["threshold"], dtype=np.int32),
            np.asarray(d["left"], dtype=np.int32),
            np.asarray(d["right"], dtype=np.int32),
            np.asarray(d["value"], dtype=np.float64),
        )


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    seed: int
    params: ForestParams

    def validate(self) -> None:
        for t in self.trees:
            if t.n_nodes == 0:
                raise ValueError("empty tree")
            if (t.feature >= self.n_features).any():
                raise ValueError("feature index out of range")
            leaves = t.feature < 0
            if ((t.value[leaves] < 0) | (t.value[leaves] > 1)).any():
                raise ValueError("leaf fraction outside [0, 1]")
            inner = ~leaves
            if ((t.left[inner] <= 0) | (t.right[inner] <= 0) | (t.left[inner] >= t.n_nodes)
                    | (t.right[inner] >= t.n_nodes)).any():
                raise ValueError("dangling child pointer")

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected (n, {self.n_features}) matrix, got {X.shape}")
        total = np.zeros(X.shape[0])
        for t in self.trees:
            total += t.value[t.apply(X)]
        return total / len(self.trees)

    def predict_row(self, counts: Mapping[int, int]) -> float:
        """Same value as ``predict_matrix`` on the densified row (identical summation order)."""
        if any(not 0 <= i < self.n_features for i in counts):
            raise ValueError("feature index out of range")
        total = 0.0
        for t in self.trees:
            total += t.leaf_value(counts)
        return total / len(self.trees)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "random_forest", "n_features": self.n_features, "seed": self.seed,
                "params": self.params.to_dict(), "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Forest:
        if d.get("kind") != "random_forest":
            raise ValueError(f"unsupported classifier kind {d.get('kind')!r}")
        forest = cls([Tree.from_dict(t) for t in d["trees"]], int(d["n_features"]), int(d["seed"]),
                     ForestParams.from_dict(d["params"]))
        forest.validate()
        return forest


def to_matrix(vectors: Sequence[FeatureVector], n_features: int) -> np.ndarray:
    X = np.zeros((len(vectors), n_features), dtype=np.int32)
    for r, v in enumerate(vectors):
        for i, c in v.entries.items():
            X[r, i] = c
    return X


class _Grower:
    def __init__(self, XT: np.ndarray, y: np.ndarray, w: np.ndarray, params: ForestParams,
                 rng: np.random.Generator):
        self.XT = XT  # (n_features, n_rows), row-major so candidate gathers are cheap
        self.y = y
        self.w = w
        self.params = params
        self.mtry = params.resolved_mtry(XT.shape[0])
        self.rng = rng
        self.feature: list[int] = []
        self.threshold: list[int] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def grow(self, rows: np.ndarray, depth: int) -> int:
        node = self._node()
        wr = self.w[rows]
        total = float(wr.sum())
        pos = float((wr * self.y[rows]).sum())
        self.value[node] = pos / total
        p = self.params
        if depth >= p.max_depth or pos == 0.0 or pos == total or total < 2 * p.min_leaf:
            return node
        split = self._best_split(rows, wr, total, pos)
        if split is None:
            return node
        f, thr = split
        go_left = self.XT[f, rows] <= thr
        self.feature[node] = f
        self.threshold[node] = thr
        left = self.grow(rows[go_left], depth + 1)
        right = self.grow(rows[~go_left], depth + 1)
        self.left[node] = left
        self.right[node] = right
        return node

    def _best_split(self, rows: np.ndarray, wr: np.ndarray, total: float, pos: float) -> tuple[int, int] | None:
        feats = self.rng.choice(self.XT.shape[0], self.mtry, replace=False)
        sub = self.XT[feats[:, None], rows[None, :]]  # (k, m)
        top = int(sub.max())
        if top == 0:
            return None
        k = len(feats)
        width = top + 1
        flat = (np.arange(k)[:, None] * width + sub).ravel()
        tot = np.bincount(flat, weights=np.tile(wr, k), minlength=k * width).reshape(k, width)
        pw = wr * self.y[rows]
        posc = np.bincount(flat, weights=np.tile(pw, k), minlength=k * width).reshape(k, width)
        left_n = np.cumsum(tot, axis=1)[:, :-1]
        left_p = np.cumsum(posc, axis=1)[:, :-1]
        right_n = total - left_n
        right_p = pos - left_p
        min_leaf = self.params.min_leaf
        valid = (left_n >= min_leaf) & (right_n >= min_leaf)
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            pl = np.where(left_n > 0, left_p / left_n, 0.0)
            pr = np.where(right_n > 0, right_p / right_n, 0.0)
            child = (left_n * 2 * pl * (1 - pl) + right_n * 2 * pr * (1 - pr)) / total
        gain = np.where(valid, gini(pos, total) - child, -np.inf)
        best = int(np.argmax(gain))
        if not gain.flat[best] > 1e-12:
            return None
        fi, thr = divmod(best, width - 1)
        return int(feats[fi]), int(thr)

    def tree(self) -> Tree:
        return Tree(np.asarray(self.feature, np.int32), np.asarray(self.threshold, np.int32),
                    np.asarray(self.left, np.int32), np.asarray(self.right, np.int32),
                    np.asarray(self.value, np.float64))


def train_forest(X: np.ndarray | Sequence[FeatureVector], y: Sequence[int] | np.ndarray,
                 params: ForestParams = ForestParams(), seed: int = 0,
                 n_features: int | None = None) -> Forest:
    """Fit a forest on a dense count matrix (or a list of sparse vectors plus ``n_features``)."""
    if not isinstance(X, np.ndarray):
        if n_features is None:
            raise ValueError("n_features is required when training from FeatureVectors")
        X = to_matrix(X, n_features)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != len(y) or len(y) < 2:
        raise ValueError("X and y must have equal length >= 2")
    if not ((y == 0) | (y == 1)).all():
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise DegenerateLabels("training labels contain a single class")
    n = X.shape[0]
    XT = np.ascontiguousarray(X.T)
    trees = []
    for i in range(params.n_trees):
        rng = np.random.default_rng([int(seed), i])
        if params.bootstrap:
            w = np.bincount(rng.integers(0, n, n), minlength=n).astype(np.float64)
        else:
            w = np.ones(n)
        rows = np.flatnonzero(w)
        g = _Grower(XT, y, w, params, rng)
        g.grow(rows, 0)
        trees.append(g.tree())
    return Forest(trees, X.shape[1], int(seed), params)
