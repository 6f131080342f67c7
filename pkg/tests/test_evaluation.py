import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memfail.evaluation import (
    EvaluationError,
    Outcomes,
    PredictionRecord,
    build_report,
    f1_score,
    match_outcomes,
    metrics,
    virr,
    virr_from_counts,
)
from memfail.trace import DAY, HOUR, DimmId, UeEvent, WindowConfig
from reference_scores import REFERENCE_SCORES

CFG = WindowConfig()
DIMMS = [DimmId(f"s{i}") for i in range(10)]


def test_no_predictions():
    out = match_outcomes([], [UeEvent(DAY, DIMMS[0])], DIMMS, CFG)
    assert tuple(out) == (0, 0, 1, 9)


def test_alarm_inside_window_is_tp():
    t = DAY
    preds = [PredictionRecord(DIMMS[0], t, 0.9, True)]
    out = match_outcomes(preds, [UeEvent(t + CFG.lead_ms + 1000, DIMMS[0])], DIMMS, CFG)
    assert tuple(out) == (1, 0, 0, 9)


def test_alarm_too_late_or_too_early_is_fn():
    u = 40 * DAY
    for t in (u - CFG.lead_ms + 1, u - CFG.lead_ms - CFG.prediction_ms - 1):
        out = match_outcomes([PredictionRecord(DIMMS[0], t, 1, True)], [UeEvent(u, DIMMS[0])], DIMMS, CFG)
        assert tuple(out) == (0, 0, 1, 9)
    for t in (u - CFG.lead_ms, u - CFG.lead_ms - CFG.prediction_ms):
        out = match_outcomes([PredictionRecord(DIMMS[0], t, 1, True)], [UeEvent(u, DIMMS[0])], DIMMS, CFG)
        assert tuple(out) == (1, 0, 0, 9)


def test_negative_predictions_and_false_alarm():
    preds = [PredictionRecord(DIMMS[1], DAY, 0.1, False), PredictionRecord(DIMMS[2], DAY, 0.7, True)]
    out = match_outcomes(preds, [], DIMMS, CFG)
    assert tuple(out) == (0, 1, 0, 9)
    assert out.per_dimm[DIMMS[2]] == "fp"


def test_prediction_outside_population():
    with pytest.raises(EvaluationError):
        match_outcomes([PredictionRecord(DimmId("zz"), 0, 1, True)], [], DIMMS, CFG)


def brute_force_outcomes(preds, ues, population, cfg):
    out = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for d in population:
        d_ues = [u for u in ues if u.dimm == d]
        hit = False
        flagged = False
        for p in preds:
            if p.dimm != d or not p.positive:
                continue
            flagged = True
            for u in d_ues:
                if p.t + cfg.lead_ms <= u.timestamp <= p.t + cfg.lead_ms + cfg.prediction_ms:
                    hit = True
        if d_ues:
            out["tp" if hit else "fn"] += 1
        else:
            out["fp" if flagged else "tn"] += 1
    return out["tp"], out["fp"], out["fn"], out["tn"]


def test_matches_brute_force_200_dimms():
    r = random.Random(11)
    pop = [DimmId(f"h{i}") for i in range(200)]
    cfg = WindowConfig(prediction_ms=5 * DAY)
    for _ in range(5):
        ues = [UeEvent(r.randrange(60 * DAY), d) for d in pop if r.random() < 0.3 for _ in range(r.randint(1, 2))]
        preds = [PredictionRecord(d, r.randrange(60 * DAY), 0.0, r.random() < 0.4)
                 for d in pop for _ in range(r.randint(0, 6))]
        out = match_outcomes(preds, ues, pop, cfg)
        assert tuple(out) == brute_force_outcomes(preds, ues, pop, cfg)
        assert sum(out) == len(pop)


def test_tick_level_accounting():
    u = 10 * DAY
    preds = [PredictionRecord(DIMMS[0], u - HOUR * 4, 1, True), PredictionRecord(DIMMS[0], u - HOUR, 1, True),
             PredictionRecord(DIMMS[1], u, 0, False)]
    out = match_outcomes(preds, [UeEvent(u, DIMMS[0])], DIMMS, CFG, tick_level=True)
    assert tuple(out) == (1, 1, 0, 1)


def test_metrics():
    assert metrics(0, 0, 0) == (None, None, None)
    p, r, f = metrics(8, 2, 2)
    assert (p, r) == (0.8, 0.8) and f == pytest.approx(0.8)
    assert metrics(0, 0, 3) == (None, 0.0, None)
    assert metrics(0, 2, 3) == (0.0, 0.0, None)


def test_virr_examples():
    assert round(virr(0.54, 0.80), 2) == 0.65
    assert round(virr(0.61, 0.62), 2) == 0.52
    assert virr(0.1, 0.7) == 0
    assert virr(0.05, 0.5) == pytest.approx(-0.5)
    assert virr(0.0, 0.5) is None and virr(None, 0.5) is None
    assert round(f1_score(0.61, 0.62), 2) == 0.61
    assert f1_score(0.54, 0.80) == pytest.approx(0.6448, abs=1e-4)


def test_virr_from_counts_examples():
    b = virr_from_counts(8, 2, 2, 10, 0.1)
    assert (b.v, b.v1, b.v2, b.v_prime) == pytest.approx((100, 10, 20, 30))
    assert b.virr == pytest.approx(0.7)
    assert virr_from_counts(0, 4, 2).virr == pytest.approx(-0.1 * 4 / 2)
    assert virr_from_counts(5, 0, 0).virr == pytest.approx(0.9)
    assert virr_from_counts(0, 3, 0).virr is None


@settings(max_examples=500)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.integers(0, 10_000),
       st.floats(0.01, 1.0), st.floats(0.1, 50))
def test_virr_identity(tp, fp, fn, y_c, v_a):
    b = virr_from_counts(tp, fp, fn, v_a, y_c)
    p, r, _ = metrics(tp, fp, fn)
    closed = virr(p, r, y_c)
    if tp > 0:
        assert b.virr == pytest.approx(closed, abs=1e-12)
        assert b.virr <= r + 1e-12


@settings(max_examples=300)
@given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0, 0.5), st.floats(0, 1))
def test_virr_monotone(p, r, dp, y_c):
    assert virr(min(1, p + dp), r, y_c) >= virr(p, r, y_c) - 1e-12
    assert virr(p, min(1, r + dp), y_c) >= virr(p, r, y_c) - 1e-12 or p < y_c


@pytest.mark.parametrize("key", sorted(REFERENCE_SCORES))
def test_reference_f1_arithmetic(key):
    p, r, f, _ = REFERENCE_SCORES[key]
    assert abs(f1_score(p, r) - f) <= 0.01


@pytest.mark.parametrize("key", sorted(REFERENCE_SCORES))
def test_reference_virr_arithmetic(key):
    p, r, _, v = REFERENCE_SCORES[key]
    assert abs(virr(p, r, 0.1) - v) <= 0.03


def test_report_json_is_stable():
    out = Outcomes(3, 1, 1, 5, {DIMMS[0]: "tp"})
    rep = build_report(out, CFG, platform_of={DIMMS[0]: "purley"})
    d = rep.to_dict()
    assert d["tp"] == 3 and d["virr"] == pytest.approx((1 - 0.1 / 0.75) * 0.75)
    assert json.dumps(d, sort_keys=True) == json.dumps(build_report(out, CFG, platform_of={DIMMS[0]: "purley"})
                                                      .to_dict(), sort_keys=True)
