"""Failure predictors: random forest, histogram GBDT and the rule baseline."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .forest import ForestModel, ForestParams, build_cart, train_forest, train_forest_arrays
from .gbdt import GbdtModel, GbdtParams, train_gbdt, train_gbdt_arrays
from .rules import Condition, Rule, RuleSet, default_ruleset, rule_score
from .tree import PredictorError, Tree

FORMAT = "memfail-model"
FORMAT_VERSION = 1
_KINDS = {"forest": ForestModel, "gbdt": GbdtModel, "rules": RuleSet}


def predict(model, data, threshold: float = 0.5):
    """Score samples and threshold them (``positive = score >= threshold``).

    ``data`` may be a ``SampleSet`` (its schema hash must match the model's),
    a single ``Sample``/vector, or a 2-D matrix. Returns ``(score, positive)``
    for one sample and ``(scores, positives)`` arrays otherwise.
    """
    schema = getattr(data, "schema", None)
    if schema is not None:
        if model.schema_hash is not None and schema.hash != model.schema_hash:
            raise PredictorError(
                "schema-mismatch", f"model schema {model.schema_hash} != data schema {schema.hash}"
            )
        X = data.X
    else:
        X = getattr(data, "features", data)
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    scores = model.predict_proba(X.reshape(1, -1) if single else X)
    positive = scores >= threshold
    if single:
        return float(scores[0]), bool(positive[0])
    return scores, positive


def model_to_json(model) -> str:
    doc = {"format": FORMAT, "version": FORMAT_VERSION, **model.to_dict()}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def model_from_json(text: str):
    doc = json.loads(text)
    if doc.get("format") != FORMAT:
        raise PredictorError("bad-model", "not a memfail model file")
    if doc.get("version") != FORMAT_VERSION:
        raise PredictorError("bad-model", f"unsupported model version {doc.get('version')}")
    kind = doc.get("kind")
    if kind not in _KINDS:
        raise PredictorError("bad-model", f"unknown model kind {kind!r}")
    return _KINDS[kind].from_dict(doc)


def save_model(path: str | Path, model) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path: str | Path):
    return model_from_json(Path(path).read_text(encoding="utf-8"))


__all__ = [
    "Condition", "ForestModel", "ForestParams", "GbdtModel", "GbdtParams", "PredictorError",
    "Rule", "RuleSet", "Tree", "build_cart", "default_ruleset", "load_model", "model_from_json",
    "model_to_json", "predict", "rule_score", "save_model", "train_forest", "train_forest_arrays",
    "train_gbdt", "train_gbdt_arrays",
]
