"""Histogram gradient-boosted trees with leaf-wise growth and logistic loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tree import PredictorError, Tree, check_training_data, class_weights


@dataclass(frozen=True)
class GbdtParams:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_leaves: int = 31
    histogram_bins: int = 64
    min_leaf: int = 20
    reg_lambda: float = 1.0
    min_split_gain: float = 0.0
    min_hessian: float = 1e-3
    max_depth: int = -1
    pos_weight: float | None = None
    bagging_fraction: float = 1.0
    feature_fraction: float = 1.0


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def bin_edges(x: np.ndarray, bins: int) -> np.ndarray:
    """Split points of one feature: every distinct value below the max when
    there are at most ``bins`` of them, otherwise equal-frequency quantiles."""
    u = np.unique(x)
    if len(u) <= bins:
        return u[:-1]
    q = np.quantile(x, np.arange(1, bins) / bins, method="inverted_cdf")
    edges = np.unique(q)
    return edges[edges < u[-1]]


def logistic_loss(y: np.ndarray, raw: np.ndarray, w: np.ndarray) -> float:
    # log(1 + e^z) - y z, computed stably
    loss = np.logaddexp(0.0, raw) - y * raw
    return float(np.sum(w * loss) / np.sum(w))


@dataclass
class GbdtModel:
    trees: list[Tree]
    params: GbdtParams
    base_score: float
    seed: int
    n_features: int
    schema_hash: str | None = None
    feature_names: list[str] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    kind = "gbdt"

    def raw_score(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise PredictorError("schema-mismatch", f"expected {self.n_features} features, got {X.shape[1]}")
        raw = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            raw += self.params.learning_rate * t.predict(X)
        return raw

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return sigmoid(self.raw_score(X))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": asdict(self.params),
            "base_score": self.base_score,
            "seed": self.seed,
            "n_features": self.n_features,
            "schema_hash": self.schema_hash,
            "feature_names": list(self.feature_names),
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], GbdtParams(**d["params"]), d["base_score"],
                   d["seed"], d["n_features"], d.get("schema_hash"), list(d.get("feature_names", [])),
                   list(d.get("train_loss", [])))


class _Grower:
    """Leaf-wise tree growth over pre-binned features."""

    def __init__(self, codes, edges, params: GbdtParams):
        self.codes = codes
        self.edges = edges
        self.p = params
        n_bins = np.array([len(e) + 1 for e in edges])
        self.width = int(n_bins.max())
        self.offsets = np.arange(len(edges)) * self.width
        # split at bin b sends codes <= b left; needs b < number of edges
        b = np.arange(self.width)
        self.valid = b[None, :] < (n_bins - 1)[:, None]

    def histogram(self, idx, g, h):
        flat = (self.codes[idx] + self.offsets).ravel()
        size = len(self.edges) * self.width
        F = len(self.edges)
        G = np.bincount(flat, weights=np.repeat(g[idx], F), minlength=size).reshape(F, self.width)
        H = np.bincount(flat, weights=np.repeat(h[idx], F), minlength=size).reshape(F, self.width)
        C = np.bincount(flat, minlength=size).reshape(F, self.width)
        return G, H, C

    def best_split(self, hist, feats_mask):
        G, H, C = hist
        lam = self.p.reg_lambda
        GL, HL, CL = np.cumsum(G, 1), np.cumsum(H, 1), np.cumsum(C, 1)
        Gt, Ht, Ct = GL[:, -1:], HL[:, -1:], CL[:, -1:]
        GR, HR, CR = Gt - GL, Ht - HL, Ct - CL
        gain = GL ** 2 / (HL + lam) + GR ** 2 / (HR + lam) - Gt ** 2 / (Ht + lam)
        ok = (self.valid & feats_mask[:, None] & (CL >= self.p.min_leaf) & (CR >= self.p.min_leaf)
              & (HL >= self.p.min_hessian) & (HR >= self.p.min_hessian))
        gain = np.where(ok, gain, -np.inf)
        k = int(np.argmax(gain))  # first maximum: lowest feature, then lowest bin
        f, b = divmod(k, self.width)
        g = float(gain[f, b])
        if not np.isfinite(g) or g <= self.p.min_split_gain:
            return None
        return g, f, b

    def grow(self, idx, g, h, feats_mask) -> tuple[Tree, list]:
        lam = self.p.reg_lambda
        tree = Tree()
        root = tree.add_node()
        hist = self.histogram(idx, g, h)
        leaves = {root: (idx, hist, 0, self.best_split(hist, feats_mask))}
        while len(leaves) < self.p.max_leaves:
            cands = [(s[0], node) for node, (_, _, _, s) in leaves.items() if s is not None]
            if not cands:
                break
            # max gain; ties go to the earliest-created (lowest id) leaf
            gain, node = max(cands, key=lambda c: (c[0], -c[1]))
            rows, hist, depth, (_, f, b) = leaves.pop(node)
            go_left = self.codes[rows, f] <= b
            lrows, rrows = rows[go_left], rows[~go_left]
            lo, hi = tree.split(node, f, self.edges[f][b])
            if len(lrows) <= len(rrows):
                lh = self.histogram(lrows, g, h)
                rh = tuple(p - c for p, c in zip(hist, lh))
            else:
                rh = self.histogram(rrows, g, h)
                lh = tuple(p - c for p, c in zip(hist, rh))
            can_split = self.p.max_depth < 0 or depth + 1 < self.p.max_depth
            for child, crows, chist in ((lo, lrows, lh), (hi, rrows, rh)):
                split = self.best_split(chist, feats_mask) if can_split else None
                leaves[child] = (crows, chist, depth + 1, split)
        assignments = []
        for node, (rows, _, _, _) in leaves.items():
            G = g[rows].sum()
            H = h[rows].sum()
            tree.value[node] = float(-G / (H + lam))
            assignments.append((node, rows))
        return tree, assignments


def train_gbdt_arrays(X, y, params: GbdtParams = GbdtParams(), seed: int = 0) -> GbdtModel:
    X, y = check_training_data(X, y)
    p = params
    if p.n_rounds < 1 or p.max_leaves < 1 or not 0 < p.learning_rate or p.histogram_bins < 2:
        raise PredictorError("bad-params", f"invalid gbdt params {p}")
    if not (0 < p.bagging_fraction <= 1 and 0 < p.feature_fraction <= 1):
        raise PredictorError("bad-params", "bagging/feature fractions must lie in (0, 1]")
    w = class_weights(y, p.pos_weight)
    n, F = X.shape
    edges = [bin_edges(X[:, j], p.histogram_bins) for j in range(F)]
    codes = np.empty((n, F), dtype=np.int64)
    for j in range(F):
        codes[:, j] = np.searchsorted(edges[j], X[:, j], side="left")

    wp = float(w[y == 1].sum())
    wn = float(w[y == 0].sum())
    base = float(np.log(wp / wn))
    raw = np.full(n, base)
    yf = y.astype(np.float64)
    grower = _Grower(codes, edges, p)
    rng = np.random.default_rng(seed)
    trees = []
    losses = [logistic_loss(yf, raw, w)]
    all_rows = np.arange(n)
    for _ in range(p.n_rounds):
        prob = sigmoid(raw)
        g = w * (prob - yf)
        h = w * prob * (1.0 - prob)
        rows = all_rows
        if p.bagging_fraction < 1:
            rows = np.sort(rng.choice(n, size=max(1, int(p.bagging_fraction * n)), replace=False))
        feats_mask = np.ones(F, dtype=bool)
        if p.feature_fraction < 1:
            k = max(1, int(np.ceil(p.feature_fraction * F)))
            feats_mask[:] = False
            feats_mask[rng.choice(F, size=k, replace=False)] = True
        tree, _ = grower.grow(rows, g, h, feats_mask)
        trees.append(tree)
        raw += p.learning_rate * tree.predict(X)
        losses.append(logistic_loss(yf, raw, w))
    return GbdtModel(trees, p, base, seed, F, train_loss=losses)


def train_gbdt(samples, params: GbdtParams = GbdtParams(), seed: int = 0) -> GbdtModel:
    model = train_gbdt_arrays(samples.X, samples.y, params, seed)
    model.schema_hash = samples.schema.hash
    model.feature_names = list(samples.schema.names)
    return model
