import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_events
from memfail.faults import (
    BitPatternStats,
    FaultDiagnosis,
    FaultThresholds,
    aggregate_bit_patterns,
    bit_pattern_stats,
    classify_faults,
    relative_ue_rate,
)
from memfail.trace import CeEvent, CellAddress, DimmId, ErrorBitmap

D = DimmId("srv")


def naive_stats(value: int, mode: str = "span") -> BitPatternStats:
    dqs, beats = set(), set()
    for beat in range(8):
        for dq in range(8):
            if value >> ((7 - beat) * 8 + dq) & 1:
                dqs.add(dq)
                beats.add(beat)

    def spread(ix):
        ix = sorted(ix)
        if len(ix) < 2:
            return 0
        return ix[-1] - ix[0] if mode == "span" else max(b - a for a, b in zip(ix, ix[1:]))

    return BitPatternStats(len(dqs), len(beats), spread(dqs), spread(beats))


def oracle_classify(events, th: FaultThresholds) -> tuple:
    """Brute-force grouping: compare every pair of events directly."""
    ces = list(events)
    keys = lambda c: (c.rank, c.device, c.bank_group, c.bank)
    cells = {}
    for e in ces:
        c = e.cell
        k = keys(c) + (c.row, c.column)
        cells.setdefault(k, []).append(e)
    cell_faults = sum(1 for v in cells.values() if sum(e.count for e in v) >= th.cell_min_ces)

    def faulty_lines(fix, vary):
        found = set()
        for a in ces:
            key = keys(a.cell) + (getattr(a.cell, fix),)
            distinct = {getattr(b.cell, vary) for b in ces if keys(b.cell) + (getattr(b.cell, fix),) == key}
            need = th.row_min_distinct_columns if fix == "row" else th.column_min_distinct_rows
            if len(distinct) >= need:
                found.add(key)
        return found

    rows = faulty_lines("row", "column")
    cols = faulty_lines("column", "row")
    banks = {r[:4] for r in rows if any(c[:4] == r[:4] for c in cols)}
    devs = {(e.cell.rank, e.cell.device) for e in ces}
    scope = "none" if not devs else ("single_device" if len(devs) == 1 else "multi_device")
    return cell_faults, len(rows), len(cols), len(banks), scope


def test_fig5_anchor():
    b = ErrorBitmap.from_bits([(0, 1), (4, 3)])
    assert bit_pattern_stats(b) == BitPatternStats(2, 2, 2, 4)


def test_saturated_and_empty_bitmaps():
    assert bit_pattern_stats(0xF0F0F0F0F0F0F0F0 >> 4) == BitPatternStats(4, 8, 3, 7)
    assert bit_pattern_stats(2 ** 64 - 1) == BitPatternStats(8, 8, 7, 7)
    assert bit_pattern_stats(0) == BitPatternStats()


def test_gap_interval_mode():
    b = ErrorBitmap.from_bits([(0, 0), (1, 1), (7, 3)])
    assert bit_pattern_stats(b, "gap") == BitPatternStats(3, 3, 2, 6)
    assert bit_pattern_stats(b, "span") == BitPatternStats(3, 3, 3, 7)
    with pytest.raises(ValueError):
        bit_pattern_stats(b, "median")


@settings(max_examples=400)
@given(st.integers(0, 2 ** 64 - 1), st.sampled_from(["span", "gap"]))
def test_bit_stats_match_naive_scan(value, mode):
    assert bit_pattern_stats(value, mode) == naive_stats(value, mode)


def test_aggregate_is_or_of_window(rng):
    events, _ = random_events(rng, 1, 50, ue_prob=0)
    acc = 0
    for e in events:
        acc |= e.bitmap.value
    assert aggregate_bit_patterns(events) == naive_stats(acc)
    lo, hi = 1000 * 60_000, 9000 * 60_000
    acc = 0
    for e in events:
        if lo < e.timestamp <= hi:
            acc |= e.bitmap.value
    assert aggregate_bit_patterns(events, (lo, hi)) == naive_stats(acc)


def test_aggregate_monotone_in_events(rng):
    events, _ = random_events(rng, 1, 60, ue_prob=0)
    prev = BitPatternStats()
    for k in range(1, len(events) + 1):
        cur = aggregate_bit_patterns(events[:k])
        assert cur.dq_count >= prev.dq_count and cur.beat_count >= prev.beat_count
        assert cur.dq_interval >= prev.dq_interval and cur.beat_interval >= prev.beat_interval
        prev = cur


def ce(row, col, dev=0, bank=0, count=1, ts=0):
    return CeEvent(ts, D, CellAddress(0, dev, 0, bank, row, col), ErrorBitmap(1), count)


def test_classify_examples():
    assert classify_faults([], dimm=D) == FaultDiagnosis(D)
    d = classify_faults([ce(1, 1), ce(1, 1)])
    assert (d.cell_faults, d.row_faults, d.column_faults, d.device_scope) == (1, 0, 0, "single_device")
    d = classify_faults([ce(1, 1, count=2)])
    assert d.cell_faults == 1
    d = classify_faults([ce(1, 1), ce(1, 2), ce(2, 1)])
    assert (d.row_faults, d.column_faults, d.bank_faults) == (1, 1, 1)
    d = classify_faults([ce(1, 1), ce(1, 2), ce(2, 5, bank=1), ce(3, 5, bank=1)])
    assert (d.row_faults, d.column_faults, d.bank_faults) == (1, 1, 0)
    d = classify_faults([ce(1, 1, dev=0), ce(1, 2, dev=3)])
    assert d.row_faults == 0 and d.device_scope == "multi_device"
    assert d.modes() == {"multi_device"}


def test_classify_respects_window():
    evs = [ce(1, 1, ts=10), ce(1, 1, ts=20)]
    assert classify_faults(evs, window=(10, 20)).cell_faults == 0
    assert classify_faults(evs, window=(0, 20)).cell_faults == 1


def test_classify_matches_brute_force_oracle():
    r = random.Random(7)
    for trial in range(150):
        events, _ = random_events(r, 1, r.randint(0, 120), ue_prob=0)
        th = FaultThresholds(r.randint(1, 3), r.randint(1, 3), r.randint(1, 3))
        d = classify_faults(events, th)
        got = (d.cell_faults, d.row_faults, d.column_faults, d.bank_faults, d.device_scope)
        assert got == oracle_classify(events, th), trial


def test_classify_monotone_in_events(rng):
    events, _ = random_events(rng, 1, 80, ue_prob=0)
    prev = (0, 0, 0, 0)
    for k in range(len(events) + 1):
        d = classify_faults(events[:k])
        cur = (d.cell_faults, d.row_faults, d.column_faults, d.bank_faults)
        assert all(c >= p for c, p in zip(cur, prev))
        prev = cur


def test_relative_ue_rate():
    a, b, c = DimmId("a"), DimmId("b"), DimmId("c")
    diags = [
        FaultDiagnosis(a, cell_faults=1, device_scope="single_device"),
        FaultDiagnosis(b, cell_faults=2, row_faults=1, device_scope="single_device"),
        FaultDiagnosis(c, row_faults=1, device_scope="multi_device"),
    ]
    rates = relative_ue_rate(diags, {b, c})
    assert rates["cell"] == (0.5, 2)
    assert rates["row"] == (1.0, 2)
    assert rates["single_device"] == (0.5, 2)
    assert rates["multi_device"] == (1.0, 1)
    assert "bank" not in rates and "column" not in rates
    assert relative_ue_rate([], set()) == {}


def test_thresholds_validated():
    with pytest.raises(ValueError):
        FaultThresholds(cell_min_ces=0)
