"""Stage orchestration: simulate -> analyze -> featurize -> train -> predict -> evaluate.

Every stage reads and writes files under one work directory and drops a
JSON report stamped with the tool version, a hash of the effective
configuration and, where features are involved, the feature-schema hash.
Paths are excluded from the configuration hash so that the same run in two
directories yields byte-identical reports.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import PredictionRecord, build_report, match_outcomes, write_outcomes_csv
from .faults import FAULT_MODES, FaultThresholds, aggregate_bit_patterns, diagnose_trace, relative_ue_rate
from .features import FeatureSchema, SampleSet, build_samples, downsample_negatives, read_matrix_csv, write_matrix_csv
from .ingest import load_column_map, parse_csv_trace, parse_jsonl_trace
from .models import (
    ForestParams,
    GbdtParams,
    PredictorError,
    RuleSet,
    default_ruleset,
    load_model,
    predict,
    save_model,
    train_forest,
    train_gbdt,
)
from .simulator import generate_trace, get_profile, save_simulation, verify_ground_truth
from .trace import (
    DimmId,
    TraceError,
    WindowConfig,
    filter_predictable_population,
    load_trace,
    read_meta,
    time_order_key,
    validate_trace,
    write_trace_jsonl,
)

log = logging.getLogger(__name__)

ENV_PREFIX = "MEMFAIL_"
STAGES = ("simulate", "ingest", "analyze", "featurize", "train", "predict", "evaluate", "report")
DEFAULT_FLOW = ("simulate", "analyze", "featurize", "train", "predict", "evaluate", "report")
BIT_STATS = ("dq_count", "beat_count", "dq_interval", "beat_interval")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class PipelineConfig:
    workdir: str = "run"
    seed: int = 0
    threads: int = 1
    profile: str = "purley"
    profile_overrides: dict = field(default_factory=dict)
    n_dimms: int = 1000
    duration_days: float = 60.0
    window: WindowConfig = field(default_factory=WindowConfig)
    thresholds: FaultThresholds = field(default_factory=FaultThresholds)
    features: dict = field(default_factory=dict)
    featurize_mode: str = "batch"
    holdout_fraction: float = 0.3
    model: str = "gbdt"
    gbdt: GbdtParams = field(default_factory=GbdtParams)
    forest: ForestParams = field(default_factory=ForestParams)
    rules: list | None = None
    rules_platform: str = "purley"
    downsample_ratio: float | None = None
    decision_threshold: float = 0.5
    y_c: float = 0.1
    v_a: float = 10.0
    ingest_source: str | None = None
    ingest_format: str = "csv"
    column_map: dict | str | None = None
    timestamp_format: str = "ms"
    reject_ceiling: float = 0.1
    bits_csv: bool = True

    def path(self, name: str) -> Path:
        return Path(self.workdir) / _FILES[name]

    def schema(self) -> FeatureSchema:
        try:
            kw = dict(self.features)
            for key in ("sub_windows_ms", "manufacturers", "chip_processes"):
                if key in kw:
                    kw[key] = tuple(kw[key])
            return FeatureSchema(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad features section: {exc}") from None

    def to_dict(self, include_paths: bool = True) -> dict:
        d = asdict(self)
        if not include_paths:
            for key in ("workdir", "ingest_source", "threads"):
                d.pop(key)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(include_paths=False), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FILES = {
    "trace": "trace.jsonl",
    "meta": "meta.json",
    "truth": "truth.json",
    "simulate_report": "simulate_report.json",
    "ingest_report": "ingest_report.json",
    "analysis": "analysis.json",
    "bits_csv": "bit_patterns.csv",
    "schema": "schema.json",
    "features_train": "features_train.csv",
    "features_test": "features_test.csv",
    "holdout": "holdout_dimms.json",
    "featurize_report": "featurize_report.json",
    "model": "model.json",
    "train_report": "train_report.json",
    "predictions": "predictions.csv",
    "predict_report": "predict_report.json",
    "report": "eval_report.json",
    "outcomes": "outcomes.csv",
    "fig_tables": "fig_tables.json",
    "relative_ue_csv": "relative_ue.csv",
    "bit_ue_csv": "bit_pattern_ue.csv",
}

_NESTED = {"window": WindowConfig, "thresholds": FaultThresholds, "gbdt": GbdtParams, "forest": ForestParams}


def config_from_dict(d: dict) -> PipelineConfig:
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kw = {}
    for key, value in d.items():
        if key in _NESTED:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            try:
                kw[key] = _NESTED[key](**value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad {key} section: {exc}") from None
        else:
            kw[key] = value
    cfg = PipelineConfig(**kw)
    _check(cfg)
    return cfg


def _check(cfg: PipelineConfig) -> None:
    if cfg.model not in ("gbdt", "forest", "rules"):
        raise ConfigError(f"model must be gbdt, forest or rules, not {cfg.model!r}")
    if cfg.featurize_mode not in ("batch", "stream"):
        raise ConfigError("featurize_mode must be batch or stream")
    if not 0 <= cfg.holdout_fraction < 1:
        raise ConfigError("holdout_fraction must lie in [0, 1)")
    if cfg.n_dimms < 1 or cfg.duration_days < 0:
        raise ConfigError("n_dimms must be >= 1 and duration_days >= 0")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg.schema()


def _parse_env_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    """``MEMFAIL_SEED=7`` sets ``seed``; ``MEMFAIL_WINDOW__LEAD_MS=3600000`` sets
    ``window.lead_ms``. Values are parsed as JSON when possible."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = _parse_env_value(value)
    return out


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k in _NESTED:
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None, environ=None) -> PipelineConfig:
    """Defaults < config file < ``MEMFAIL_*`` environment < explicit overrides."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
    d = _merge(d, env_overrides(environ))
    d = _merge(d, {k: v for k, v in (overrides or {}).items() if v is not None})
    return config_from_dict(d)


def _provenance(cfg: PipelineConfig, stage: str, schema_hash: str | None = None) -> dict:
    return {
        "tool": "memfail",
        "version": __version__,
        "stage": stage,
        "config_hash": cfg.hash(),
        "schema_hash": schema_hash,
        "seed": cfg.seed,
    }


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1, default=str) + "\n", encoding="utf-8")
    return path


def _require(cfg: PipelineConfig, *names: str) -> None:
    for name in names:
        if not cfg.path(name).exists():
            raise DataError(f"missing prerequisite {cfg.path(name)}; run the stage that produces it first")


def _trace(cfg: PipelineConfig):
    _require(cfg, "trace", "meta")
    try:
        return load_trace(cfg.path("trace"), cfg.path("meta"))
    except TraceError as exc:
        raise DataError(str(exc)) from None


# ---------------------------------------------------------------------------
# stages

def stage_simulate(cfg: PipelineConfig) -> Path:
    try:
        profile = get_profile(cfg.profile, cfg.profile_overrides or None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    events, meta, truth = generate_trace(profile, cfg.n_dimms, cfg.duration_days, cfg.seed)
    save_simulation(cfg.workdir, events, meta, truth)
    trace = validate_trace(events, meta)
    check = verify_ground_truth(trace, truth, cfg.thresholds)
    ues = trace.ues
    doc = {
        **_provenance(cfg, "simulate"),
        "profile": profile.to_dict(),
        "events": len(events),
        "ce_events": len(events) - len(ues),
        "ue_dimms": len(trace.ue_dimms()),
        "predictable_ue_fraction": (sum(not u.sudden for u in ues) / len(ues)) if ues else None,
        "ground_truth_check": {k: v for k, v in check.items() if k != "mismatches"},
    }
    return _write_json(cfg.path("simulate_report"), doc)


def stage_ingest(cfg: PipelineConfig) -> Path:
    if not cfg.ingest_source:
        raise ConfigError("ingest needs ingest_source")
    source = Path(cfg.ingest_source)
    if not source.exists():
        raise DataError(f"ingest source {source} not found")
    meta = read_meta(cfg.path("meta")) if cfg.path("meta").exists() else None
    try:
        if cfg.ingest_format == "csv":
            cmap = cfg.column_map
            if isinstance(cmap, str):
                cmap = load_column_map(cmap)
            result = parse_csv_trace(source, cmap, meta, timestamp_format=cfg.timestamp_format,
                                     reject_ceiling=cfg.reject_ceiling)
        elif cfg.ingest_format == "jsonl":
            widths = {m.dimm: m.data_width for m in meta} if meta else None
            result = parse_jsonl_trace(source, cfg.reject_ceiling, widths)
        else:
            raise ConfigError(f"unknown ingest format {cfg.ingest_format!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise DataError(str(exc)) from None
    events = result.events
    if meta is not None:
        events = validate_trace(events, meta).events
    events = sorted(events, key=time_order_key)
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    write_trace_jsonl(cfg.path("trace"), events)
    doc = {
        **_provenance(cfg, "ingest"),
        "lines": result.lines,
        "events": len(events),
        "rejected": len(result.rejects),
        "rejects": [{"line": r.line, "diagnostics": r.diagnostics} for r in result.rejects[:1000]],
    }
    return _write_json(cfg.path("ingest_report"), doc)


def analyze_trace(trace, thresholds: FaultThresholds) -> dict:
    """Whole-trace diagnosis per DIMM plus the relative-UE-rate tables."""
    diagnoses = diagnose_trace(trace, thresholds)
    ue = trace.ue_dimms()
    by_dimm = trace.by_dimm()
    rows = []
    for d, diag in diagnoses.items():
        bits = aggregate_bit_patterns(by_dimm[d][0])
        rows.append({**diag.to_dict(), **asdict(bits), "ue": d in ue})
    rates = relative_ue_rate(diagnoses, ue)
    return {
        "population": len(diagnoses),
        "ue_dimms": len(ue),
        "relative_ue_rate": {m: {"rate": r, "population": n} for m, (r, n) in rates.items()},
        "dimms": rows,
    }


def stage_analyze(cfg: PipelineConfig) -> Path:
    trace = _trace(cfg)
    doc = {**_provenance(cfg, "analyze"), **analyze_trace(trace, cfg.thresholds)}
    if cfg.bits_csv:
        with open(cfg.path("bits_csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dimm", *BIT_STATS, "ue"])
            for r in doc["dimms"]:
                w.writerow([r["dimm"], *(r[k] for k in BIT_STATS), int(r["ue"])])
    return _write_json(cfg.path("analysis"), doc)


def split_dimms(dimms: list[DimmId], fraction: float, seed: int) -> tuple[list[DimmId], list[DimmId]]:
    """Seeded DIMM-level train/holdout split (both sorted)."""
    ordered = sorted(dimms)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5117])).permutation(len(ordered))
    k = int(round(fraction * len(ordered)))
    test = sorted(ordered[i] for i in perm[:k])
    test_set = set(test)
    return [d for d in ordered if d not in test_set], test


def stage_featurize(cfg: PipelineConfig) -> Path:
    trace = filter_predictable_population(_trace(cfg))
    schema = cfg.schema()
    try:
        samples = build_samples(trace, cfg.window, cfg.featurize_mode, schema, cfg.thresholds)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train, test = split_dimms(trace.dimms(), cfg.holdout_fraction, cfg.seed)
    schema.save(cfg.path("schema"))
    write_matrix_csv(cfg.path("features_train"), samples.select_dimms(train))
    write_matrix_csv(cfg.path("features_test"), samples.select_dimms(test))
    _write_json(cfg.path("holdout"), [str(d) for d in test])
    doc = {
        **_provenance(cfg, "featurize", schema.hash),
        "mode": cfg.featurize_mode,
        "samples": len(samples),
        "positives": int(samples.y.sum()),
        "train_dimms": len(train),
        "holdout_dimms": len(test),
        "unknown_categoricals": dict(sorted(samples.unknown.items())),
    }
    return _write_json(cfg.path("featurize_report"), doc)


def _load_schema(cfg: PipelineConfig) -> FeatureSchema:
    _require(cfg, "schema")
    try:
        return FeatureSchema.load(cfg.path("schema"))
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad schema file: {exc}") from None


def _load_matrix(cfg: PipelineConfig, name: str, schema: FeatureSchema) -> SampleSet:
    _require(cfg, name)
    try:
        return read_matrix_csv(cfg.path(name), schema)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def stage_train(cfg: PipelineConfig) -> Path:
    schema = _load_schema(cfg)
    samples = _load_matrix(cfg, "features_train", schema)
    if cfg.downsample_ratio:
        samples = downsample_negatives(samples, cfg.downsample_ratio, cfg.seed)
    try:
        if cfg.model == "gbdt":
            model = train_gbdt(samples, cfg.gbdt, cfg.seed)
        elif cfg.model == "forest":
            model = train_forest(samples, cfg.forest, cfg.seed)
        else:
            model = (RuleSet.from_dict({"rules": cfg.rules}) if cfg.rules is not None
                     else default_ruleset(cfg.rules_platform)).bind(schema)
    except PredictorError as exc:
        raise DataError(str(exc)) from None
    save_model(cfg.path("model"), model)
    digest = hashlib.sha256(cfg.path("model").read_bytes()).hexdigest()[:16]
    doc = {
        **_provenance(cfg, "train", schema.hash),
        "model": cfg.model,
        "samples": len(samples),
        "positives": int(samples.y.sum()),
        "model_sha256": digest,
    }
    return _write_json(cfg.path("train_report"), doc)


def stage_predict(cfg: PipelineConfig) -> Path:
    _require(cfg, "model")
    schema = _load_schema(cfg)
    model = load_model(cfg.path("model"))
    if model.schema_hash != schema.hash:
        raise DataError(f"schema-mismatch: model {model.schema_hash} vs features {schema.hash}")
    samples = _load_matrix(cfg, "features_test", schema)
    try:
        scores, positive = predict(model, samples, cfg.decision_threshold)
    except PredictorError as exc:
        raise DataError(str(exc)) from None
    with open(cfg.path("predictions"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dimm", "t", "score", "positive"])
        for i in range(len(samples)):
            w.writerow([str(samples.dimms[i]), int(samples.times[i]), repr(float(scores[i])), int(positive[i])])
    doc = {
        **_provenance(cfg, "predict", schema.hash),
        "samples": len(samples),
        "positive": int(np.sum(positive)),
        "threshold": cfg.decision_threshold,
    }
    return _write_json(cfg.path("predict_report"), doc)


def read_predictions(path: Path) -> list[PredictionRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None:
            return out
        if header != ["dimm", "t", "score", "positive"]:
            raise DataError(f"{path}: unexpected predictions header {header}")
        for lineno, rec in enumerate(r, 2):
            try:
                out.append(PredictionRecord(DimmId.parse(rec[0]), int(rec[1]), float(rec[2]), rec[3] == "1"))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction row: {exc}") from None
    return out


def stage_evaluate(cfg: PipelineConfig) -> Path:
    trace = filter_predictable_population(_trace(cfg))
    _require(cfg, "predictions")
    if cfg.path("holdout").exists():
        population = [DimmId.parse(s) for s in json.loads(cfg.path("holdout").read_text())]
    else:
        population = trace.dimms()
    preds = read_predictions(cfg.path("predictions"))
    try:
        outcomes = match_outcomes(preds, trace.ues, population, cfg.window)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    platform_of = {d: m.platform for d, m in trace.meta.items()}
    report = build_report(outcomes, cfg.window, cfg.y_c, cfg.v_a, platform_of)
    write_outcomes_csv(cfg.path("outcomes"), outcomes)
    schema_hash = _load_schema(cfg).hash if cfg.path("schema").exists() else None
    doc = {**_provenance(cfg, "evaluate", schema_hash), **report.to_dict()}
    return _write_json(cfg.path("report"), doc)


def emit_fig_tables(analysis: dict) -> dict:
    """Relative-UE-rate table per fault mode and UE-rate tables per DQ/beat statistic."""
    rel = [{"mode": m, **analysis["relative_ue_rate"][m]}
           for m in FAULT_MODES if m in analysis.get("relative_ue_rate", {})]
    bit_tables = {}
    for stat in BIT_STATS:
        groups: dict[int, list[int]] = {}
        for r in analysis.get("dimms", []):
            g = groups.setdefault(int(r[stat]), [0, 0])
            g[0] += 1
            g[1] += bool(r["ue"])
        bit_tables[stat] = [{"value": v, "population": n, "ue": k, "rate": k / n}
                            for v, (n, k) in sorted(groups.items())]
    return {"relative_ue_rate": rel, "bit_patterns": bit_tables}


def stage_report(cfg: PipelineConfig) -> Path:
    _require(cfg, "analysis")
    analysis = json.loads(cfg.path("analysis").read_text(encoding="utf-8"))
    tables = emit_fig_tables(analysis)
    with open(cfg.path("relative_ue_csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "rate", "population"])
        for r in tables["relative_ue_rate"]:
            w.writerow([r["mode"], repr(r["rate"]), r["population"]])
    with open(cfg.path("bit_ue_csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stat", "value", "population", "ue", "rate"])
        for stat, rows in tables["bit_patterns"].items():
            for r in rows:
                w.writerow([stat, r["value"], r["population"], r["ue"], repr(r["rate"])])
    return _write_json(cfg.path("fig_tables"), {**_provenance(cfg, "report"), **tables})


_STAGE_FUNCS = {
    "simulate": stage_simulate,
    "ingest": stage_ingest,
    "analyze": stage_analyze,
    "featurize": stage_featurize,
    "train": stage_train,
    "predict": stage_predict,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(stage: str, cfg: PipelineConfig) -> Path:
    """Run one stage and return the path of its report."""
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    log.info("stage %s (config %s)", stage, cfg.hash())
    return _STAGE_FUNCS[stage](cfg)


def run_pipeline(cfg: PipelineConfig, stages=DEFAULT_FLOW) -> dict[str, Path]:
    return {s: run_stage(s, cfg) for s in stages}

