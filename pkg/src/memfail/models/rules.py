"""Rule-based risky-CE-pattern baseline.

A rule is a conjunction of feature comparisons; a sample scores 1 when any
rule holds. The shipped defaults approximate the per-platform DQ/beat
patterns that carry the highest UE rates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tree import PredictorError

_OPS = {
    ">=": np.greater_equal,
    "<=": np.less_equal,
    "=": np.equal,
}


@dataclass(frozen=True)
class Condition:
    feature: str
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in _OPS:
            raise PredictorError("bad-rule", f"comparator must be one of {sorted(_OPS)}, got {self.op!r}")
        object.__setattr__(self, "threshold", float(self.threshold))
        if not math.isfinite(self.threshold):
            raise PredictorError("bad-rule", "rule thresholds must be finite")


@dataclass(frozen=True)
class Rule:
    conditions: tuple[Condition, ...]


@dataclass
class RuleSet:
    rules: list[Rule] = field(default_factory=list)
    schema_hash: str | None = None
    feature_names: list[str] = field(default_factory=list)

    kind = "rules"

    def check(self, names) -> dict[str, int]:
        index = {n: i for i, n in enumerate(names)}
        for rule in self.rules:
            for c in rule.conditions:
                if c.feature not in index:
                    raise PredictorError("schema-mismatch", f"rule uses unknown feature {c.feature!r}")
        return index

    def bind(self, schema) -> "RuleSet":
        self.check(schema.names)
        self.schema_hash = schema.hash
        self.feature_names = list(schema.names)
        return self

    def score_matrix(self, X: np.ndarray, names) -> np.ndarray:
        index = self.check(names)
        X = np.asarray(X, dtype=np.float64)
        fired = np.zeros(X.shape[0], dtype=bool)
        for rule in self.rules:
            ok = np.ones(X.shape[0], dtype=bool)
            for c in rule.conditions:
                ok &= _OPS[c.op](X[:, index[c.feature]], c.threshold)
            fired |= ok
        return fired.astype(np.float64)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        if not self.feature_names:
            raise PredictorError("schema-mismatch", "rule set is not bound to a feature schema")
        if np.asarray(X).shape[1] != len(self.feature_names):
            raise PredictorError("schema-mismatch", "feature count differs from bound schema")
        return self.score_matrix(X, self.feature_names)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "schema_hash": self.schema_hash,
            "feature_names": list(self.feature_names),
            "rules": [[[c.feature, c.op, c.threshold] for c in r.conditions] for r in self.rules],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RuleSet":
        rules = [Rule(tuple(Condition(f, op, float(t)) for f, op, t in r)) for r in d.get("rules", [])]
        return cls(rules, d.get("schema_hash"), list(d.get("feature_names", [])))

    @classmethod
    def load(cls, path: str | Path) -> "RuleSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def rule_score(ruleset: RuleSet, sample, names=None) -> int:
    """1 iff any rule's conjunction holds for ``sample``.

    ``sample`` is a feature vector (with ``names``), a ``Sample`` plus
    ``names``, or a mapping of feature name to value.
    """
    if isinstance(sample, dict):
        names = list(sample)
        x = np.array([[sample[n] for n in names]], dtype=np.float64)
    else:
        vec = getattr(sample, "features", sample)
        if names is None:
            names = ruleset.feature_names
        x = np.asarray(vec, dtype=np.float64).reshape(1, -1)
        if x.shape[1] != len(names):
            raise PredictorError("schema-mismatch", "sample length differs from feature names")
    return int(ruleset.score_matrix(x, names)[0])


def default_ruleset(platform: str = "purley") -> RuleSet:
    """Highest-risk DQ/beat patterns per platform."""
    if platform == "purley":
        rules = [Rule((Condition("dq_count", ">=", 2), Condition("beat_interval", "=", 4)))]
    elif platform == "whitley":
        rules = [Rule((Condition("dq_count", ">=", 4), Condition("beat_count", ">=", 5)))]
    else:
        rules = [Rule((Condition("dq_count", ">=", 2), Condition("beat_count", ">=", 2)))]
    return RuleSet(rules)
