"""Flat binary tree shared by the forest and the boosting model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PredictorError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass
class Tree:
    """Node ``i`` is a leaf iff ``feature[i] == -1``; internal nodes send
    ``x[feature] <= threshold`` to ``left``."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def add_node(self, value: float = 0.0) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.feature) - 1

    def split(self, node: int, feature: int, threshold: float) -> tuple[int, int]:
        lo = self.add_node()
        hi = self.add_node()
        self.feature[node] = int(feature)
        self.threshold[node] = float(threshold)
        self.left[node] = lo
        self.right[node] = hi
        return lo, hi

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f == -1)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        feat = np.asarray(self.feature, dtype=np.int64)
        thr = np.asarray(self.threshold, dtype=np.float64)
        left = np.asarray(self.left, dtype=np.int64)
        right = np.asarray(self.right, dtype=np.int64)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = feat[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, feat[nd]] <= thr[nd]
            node[r] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.value, dtype=np.float64)[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": list(self.feature),
            "threshold": [float(v) for v in self.threshold],
            "left": list(self.left),
            "right": list(self.right),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        t = cls(list(d["feature"]), list(d["threshold"]), list(d["left"]), list(d["right"]), list(d["value"]))
        n = len(t.feature)
        if not all(len(getattr(t, k)) == n for k in ("threshold", "left", "right", "value")):
            raise PredictorError("bad-model", "tree arrays differ in length")
        return t


def check_training_data(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int8)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise PredictorError("bad-data", f"X {X.shape} and y {y.shape} do not line up")
    if not np.isfinite(X).all():
        raise PredictorError("bad-data", "features must be finite")
    if not set(np.unique(y).tolist()) <= {0, 1}:
        raise PredictorError("bad-data", "labels must be 0/1")
    if y.size == 0 or y.min() == y.max():
        raise PredictorError("degenerate-data", "training needs at least one sample of each class")
    return X, y


def class_weights(y: np.ndarray, pos_weight: float | None) -> np.ndarray:
    """Per-sample weights; ``pos_weight=None`` balances the classes (neg/pos)."""
    if pos_weight is None:
        pos_weight = float((y == 0).sum()) / float((y == 1).sum())
    if pos_weight <= 0:
        raise PredictorError("bad-params", "pos_weight must be positive")
    return np.where(y == 1, pos_weight, 1.0)
