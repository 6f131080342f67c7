import json

import pytest

from memfail.faults import FaultThresholds
from memfail.simulator import (
    GroundTruth,
    ProfileError,
    builtin_profiles,
    dimm_ids,
    generate_trace,
    get_profile,
    load_truth,
    save_simulation,
    verify_ground_truth,
)
from memfail.trace import validate_trace


def test_builtin_fractions_and_mixes():
    p = builtin_profiles()
    assert p["purley"].predictable_ue_fraction == 0.73
    assert p["whitley"].predictable_ue_fraction == 0.42
    assert p["k920"].predictable_ue_fraction == 0.82
    for prof in p.values():
        assert sum(prof.fault_mode_mix.values()) == pytest.approx(1)
        assert sum(prof.device_scope_mix.values()) == pytest.approx(1)
        prof.validate()


def test_profile_overrides_and_errors():
    p = get_profile("purley", {"predictable_ue_fraction": 0.5})
    assert p.predictable_ue_fraction == 0.5 and p.name == "purley"
    with pytest.raises(ProfileError):
        get_profile("nope")
    with pytest.raises(ProfileError):
        get_profile("purley", {"fault_mode_mix": {"cell": 0.9}})


def test_zero_duration_is_empty():
    events, meta, truth = generate_trace(get_profile("purley"), 50, 0.0, seed=1)
    assert events == [] and len(meta) == 50


def test_same_seed_gives_identical_files(tmp_path):
    prof = get_profile("k920")
    for name in ("a", "b"):
        save_simulation(tmp_path / name, *generate_trace(prof, 300, 30, seed=9))
    for f in ("trace.jsonl", "meta.json", "truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    save_simulation(tmp_path / "c", *generate_trace(prof, 300, 30, seed=10))
    assert (tmp_path / "a" / "trace.jsonl").read_bytes() != (tmp_path / "c" / "trace.jsonl").read_bytes()


def test_dimm_streams_independent_of_population_size():
    prof = get_profile("purley")
    small, _, t_small = generate_trace(prof, 40, 20, seed=3)
    big, _, t_big = generate_trace(prof, 80, 20, seed=3)
    # sudden-UE victims are drawn from the whole healthy population; faulty DIMMs are not
    faulty = {d for d in dimm_ids(40) if t_small.dimms[d].faulty}
    assert faulty and faulty == {d for d in dimm_ids(40) if t_big.dimms[d].faulty}
    pick = lambda evs: [e for e in evs if e.dimm in faulty]
    assert pick(small) == pick(big)


def test_truth_roundtrip(tmp_path):
    events, meta, truth = generate_trace(get_profile("whitley"), 100, 10, seed=2)
    save_simulation(tmp_path, events, meta, truth)
    back = load_truth(tmp_path / "truth.json")
    assert back.to_dict() == truth.to_dict()
    assert json.loads((tmp_path / "truth.json").read_text())["seed"] == 2


@pytest.mark.parametrize("name", ["purley", "whitley", "k920"])
def test_default_thresholds_recover_injected_faults(name):
    events, meta, truth = generate_trace(get_profile(name), 1000, 30, seed=4)
    report = verify_ground_truth(validate_trace(events, meta), truth)
    assert report["injected"] > 0
    assert report["recovery"] >= 0.95 and report["passed"]
    assert not report["threshold_mismatch"]


def test_unreachable_thresholds_flagged():
    events, meta, truth = generate_trace(get_profile("purley"), 300, 30, seed=4)
    th = FaultThresholds(cell_min_ces=10**6, row_min_distinct_columns=10**6, column_min_distinct_rows=10**6)
    report = verify_ground_truth(validate_trace(events, meta), truth, th)
    assert report["recovery"] == 0
    assert report["threshold_mismatch"] and not report["passed"]


def test_empty_trace_vacuous_pass():
    report = verify_ground_truth(validate_trace([], []), GroundTruth("purley", 0))
    assert report["passed"] and report["recovery"] is None and report["injected"] == 0


def test_sudden_ues_have_no_prior_ce():
    events, meta, truth = generate_trace(get_profile("whitley"), 1000, 30, seed=8)
    trace = validate_trace(events, meta)
    for d, t in truth.dimms.items():
        if t.destined:
            ces, ues = trace.by_dimm()[d]
            assert ues and ues[0].sudden == t.sudden
