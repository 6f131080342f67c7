"""Random forest of weighted-Gini CART trees."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tree import PredictorError, Tree, check_training_data, class_weights


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 5
    # "sqrt", a fraction in (0, 1], or an explicit feature count
    feature_subsample: str | float | int = "sqrt"
    bootstrap: bool = True
    pos_weight: float | None = None

    def n_features(self, total: int) -> int:
        fs = self.feature_subsample
        if fs == "sqrt":
            k = int(math.sqrt(total))
        elif isinstance(fs, float):
            k = int(math.ceil(fs * total))
        else:
            k = int(fs)
        return max(1, min(total, k))


@dataclass
class ForestModel:
    trees: list[Tree]
    params: ForestParams
    seed: int
    n_features: int
    schema_hash: str | None = None
    feature_names: list[str] = field(default_factory=list)

    kind = "forest"

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise PredictorError("schema-mismatch", f"expected {self.n_features} features, got {X.shape[1]}")
        acc = np.zeros(X.shape[0])
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": asdict(self.params),
            "seed": self.seed,
            "n_features": self.n_features,
            "schema_hash": self.schema_hash,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], ForestParams(**d["params"]), d["seed"],
                   d["n_features"], d.get("schema_hash"), list(d.get("feature_names", [])))


def _best_split(X, idx, wpos, wneg, cnt, feats, min_leaf):
    """Best (feature, threshold) by weighted Gini, or None.

    Candidates are scanned in ascending feature order and, within a feature,
    ascending threshold order; only a strictly better score replaces the
    incumbent, so ties keep the lowest feature and threshold.
    """
    P = wpos[idx].sum()
    N = wneg[idx].sum()
    parent = (P * P + N * N) / (P + N)
    best = None
    best_score = parent * (1 + 1e-12) + 1e-12
    for f in feats:
        xs = X[idx, f]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        cp = np.cumsum(wpos[idx][order])
        cn = np.cumsum(wneg[idx][order])
        cc = np.cumsum(cnt[idx][order])
        total = cc[-1]
        ok = (xs[:-1] < xs[1:]) & (cc[:-1] >= min_leaf) & (total - cc[:-1] >= min_leaf)
        if not ok.any():
            continue
        lp, ln = cp[:-1], cn[:-1]
        rp, rn = P - lp, N - ln
        with np.errstate(divide="ignore", invalid="ignore"):
            score = (lp * lp + ln * ln) / (lp + ln) + (rp * rp + rn * rn) / (rp + rn)
        score = np.where(ok, score, -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = score[i]
            best = (int(f), float((xs[i] + xs[i + 1]) / 2.0))
    return best


def build_cart(
    X: np.ndarray,
    y: np.ndarray,
    weight: np.ndarray,
    counts: np.ndarray,
    max_depth: int,
    min_leaf: int,
    n_sub: int,
    rng: np.random.Generator,
) -> Tree:
    """Grow one CART tree depth-first (left child first).

    ``counts`` are per-row multiplicities (bootstrap draws); rows with count
    0 are out of bag. Leaves hold the weighted positive fraction.
    """
    wpos = np.where(y == 1, weight * counts, 0.0)
    wneg = np.where(y == 0, weight * counts, 0.0)
    F = X.shape[1]
    tree = Tree()
    root = tree.add_node()
    stack = [(root, np.flatnonzero(counts > 0), 0)]
    while stack:
        node, idx, depth = stack.pop()
        P = wpos[idx].sum()
        N = wneg[idx].sum()
        tree.value[node] = float(P / (P + N))
        if depth >= max_depth or P == 0 or N == 0 or counts[idx].sum() < 2 * min_leaf:
            continue
        feats = np.arange(F) if n_sub >= F else np.sort(rng.choice(F, size=n_sub, replace=False))
        split = _best_split(X, idx, wpos, wneg, counts, feats, min_leaf)
        if split is None:
            continue
        f, thr = split
        lo, hi = tree.split(node, f, thr)
        go_left = X[idx, f] <= thr
        # push right first so the left subtree is built (and numbered) first
        stack.append((hi, idx[~go_left], depth + 1))
        stack.append((lo, idx[go_left], depth + 1))
    return tree


def train_forest_arrays(X, y, params: ForestParams = ForestParams(), seed: int = 0) -> ForestModel:
    X, y = check_training_data(X, y)
    if params.n_trees < 1 or params.max_depth < 0 or params.min_leaf < 1:
        raise PredictorError("bad-params", f"invalid forest params {params}")
    w = class_weights(y, params.pos_weight)
    n, F = X.shape
    n_sub = params.n_features(F)
    trees = []
    for k in range(params.n_trees):
        rng = np.random.default_rng([seed, k])
        if params.bootstrap:
            counts = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        else:
            counts = np.ones(n)
        trees.append(build_cart(X, y, w, counts, params.max_depth, params.min_leaf, n_sub, rng))
    return ForestModel(trees, params, seed, F)


def train_forest(samples, params: ForestParams = ForestParams(), seed: int = 0) -> ForestModel:
    """Fit on a ``SampleSet``; the model remembers its feature-schema hash."""
    model = train_forest_arrays(samples.X, samples.y, params, seed)
    model.schema_hash = samples.schema.hash
    model.feature_names = list(samples.schema.names)
    return model
