import csv
import json

import pytest

from memfail.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from memfail.pipeline import (
    ConfigError,
    DataError,
    config_from_dict,
    emit_fig_tables,
    env_overrides,
    load_config,
    run_pipeline,
    run_stage,
)

SMALL = {
    "n_dimms": 400,
    "duration_days": 30,
    "window": {"prediction_interval_ms": 86_400_000},
    "gbdt": {"n_rounds": 15},
}


def config(tmp_path, name="run", **kw):
    return config_from_dict({**SMALL, "workdir": str(tmp_path / name), "seed": 7, **kw})


def test_full_pipeline_is_byte_identical(tmp_path):
    a = run_pipeline(config(tmp_path, "a"))
    b = run_pipeline(config(tmp_path, "b"))
    for stage in a:
        assert a[stage].read_bytes() == b[stage].read_bytes(), stage
    for f in ("predictions.csv", "model.json", "outcomes.csv", "features_test.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rep = json.loads(a["evaluate"].read_text())
    assert rep["seed"] == 7 and rep["config_hash"] and rep["schema_hash"]
    assert rep["tp"] + rep["fp"] + rep["fn"] + rep["tn"] == len(json.loads((tmp_path / "a" / "holdout_dimms.json")
                                                                       .read_text()))


def test_config_hash_ignores_workdir(tmp_path):
    assert config(tmp_path, "a").hash() == config(tmp_path, "b").hash()
    assert config(tmp_path, "a").hash() != config(tmp_path, "a", seed=8).hash()


def test_schema_mismatch_refused(tmp_path):
    cfg = config(tmp_path)
    run_pipeline(cfg, ("simulate", "featurize", "train"))
    cfg2 = config(tmp_path, features={"storm_threshold": 3})
    run_stage("featurize", cfg2)
    with pytest.raises(DataError, match="schema-mismatch"):
        run_stage("predict", cfg2)
    assert main(["predict", "--workdir", cfg.workdir, "--seed", "7"]) == EXIT_DATA


def test_empty_predictions(tmp_path):
    cfg = config(tmp_path)
    run_pipeline(cfg, ("simulate", "featurize"))
    (tmp_path / "run" / "predictions.csv").write_text("dimm,t,score,positive\n")
    rep = json.loads(run_stage("evaluate", cfg).read_text())
    holdout = set(json.loads((tmp_path / "run" / "holdout_dimms.json").read_text()))
    truth = json.loads((tmp_path / "run" / "truth.json").read_text())["dimms"]
    ue_with_ce = {d for d, t in truth.items() if t["ue_times"] and not t["sudden"]}
    assert rep["tp"] == rep["fp"] == 0
    assert rep["fn"] == len(ue_with_ce & holdout)


def test_missing_prerequisite(tmp_path):
    with pytest.raises(DataError, match="missing prerequisite"):
        run_stage("train", config(tmp_path))


def test_config_errors():
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"model": "svm"})
    with pytest.raises(ConfigError):
        config_from_dict({"window": {"lead_ms": 0}})


def test_env_overrides(tmp_path):
    env = {"MEMFAIL_SEED": "11", "MEMFAIL_WINDOW__LEAD_MS": "3600000", "OTHER": "x"}
    assert env_overrides(env) == {"seed": 11, "window": {"lead_ms": 3600000}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 3, "window": {"prediction_ms": 86_400_000}}))
    cfg = load_config(path, {"n_dimms": 5}, environ=env)
    assert cfg.seed == 11 and cfg.n_dimms == 5
    assert cfg.window.lead_ms == 3_600_000 and cfg.window.prediction_ms == 86_400_000


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["train", "--workdir", str(tmp_path / "none")]) == EXIT_DATA
    cfg = tmp_path / "ok.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["run", "--config", str(cfg), "--workdir", str(tmp_path / "w"), "--seed", "1",
                 "--threads", "2"]) == EXIT_OK
    assert "evaluate: wrote" in capsys.readouterr().out


def test_cli_ingest(tmp_path):
    work = tmp_path / "w"
    assert main(["simulate", "--workdir", str(work), "--n-dimms", "50", "--days", "10"]) == EXIT_OK
    from memfail.ingest import csv_text
    from memfail.trace import load_trace
    trace = load_trace(work / "trace.jsonl", work / "meta.json")
    src = tmp_path / "log.csv"
    src.write_text(csv_text(trace.events))
    before = (work / "trace.jsonl").read_bytes()
    assert main(["ingest", str(src), "--workdir", str(work)]) == EXIT_OK
    assert (work / "trace.jsonl").read_bytes() == before
    assert main(["ingest", str(tmp_path / "missing.csv"), "--workdir", str(work)]) == EXIT_DATA


def test_fig_tables_empty_population():
    t = emit_fig_tables({"relative_ue_rate": {}, "dimms": []})
    assert t["relative_ue_rate"] == []
    assert all(rows == [] for rows in t["bit_patterns"].values())


def _single_multi(tmp_path, profile):
    cfg = config_from_dict({"workdir": str(tmp_path / profile), "profile": profile, "n_dimms": 3000,
                            "duration_days": 60, "seed": 5})
    run_pipeline(cfg, ("simulate", "analyze", "report"))
    with open(tmp_path / profile / "relative_ue.csv") as fh:
        rates = {r["mode"]: float(r["rate"]) for r in csv.DictReader(fh)}
    return rates["single_device"], rates["multi_device"]


def test_fig_tables_scope_ordering(tmp_path):
    single, multi = _single_multi(tmp_path, "purley")
    assert single > multi
    single, multi = _single_multi(tmp_path, "k920")
    assert multi > single
    tables = json.loads((tmp_path / "k920" / "fig_tables.json").read_text())
    assert {row["mode"] for row in tables["relative_ue_rate"]} >= {"cell", "row", "single_device"}
    assert set(tables["bit_patterns"]) == {"dq_count", "beat_count", "dq_interval", "beat_interval"}
