import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_events
from memfail.trace import (
    CeEvent,
    CellAddress,
    DimmId,
    DimmMeta,
    ErrorBitmap,
    TraceError,
    UeEvent,
    WindowConfig,
    filter_predictable_population,
    load_trace,
    read_trace_jsonl,
    record_to_event,
    event_to_record,
    validate_trace,
    write_meta,
    write_trace_jsonl,
)

D = DimmId("srv", 0, 1, 0)
CELL = CellAddress(0, 3, 1, 2, 100, 7)
META = [DimmMeta(D, "A", "x4", 2933, "1y", "purley")]


def test_empty_trace():
    t = validate_trace([], [])
    assert len(t) == 0 and t.span is None and t.by_dimm() == {}


def test_sudden_flag_recomputed():
    ue = UeEvent(10, D, sudden=False)
    t = validate_trace([ue], META)
    assert t.ues[0].sudden

    ce = CeEvent(5, D, CELL, ErrorBitmap(1))
    t = validate_trace([UeEvent(10, D, sudden=True), ce], META)
    assert not t.ues[0].sudden


def test_ce_at_same_timestamp_precedes_ue():
    t = validate_trace([UeEvent(10, D), CeEvent(10, D, CELL, ErrorBitmap(1))], META)
    assert [e.kind for e in t.events] == ["ce", "ue"]
    assert not t.ues[0].sudden


def test_missing_meta_and_out_of_width_rejected():
    other = DimmId("x")
    bad = CeEvent(1, D, CELL, ErrorBitmap(0x80, 8))
    t = validate_trace([CeEvent(1, other, CELL, ErrorBitmap(1)), bad], META)
    assert len(t) == 0
    assert sorted(r.kind for r in t.rejected) == ["malformed-bitmap", "missing-meta"]
    with pytest.raises(TraceError):
        validate_trace([bad], META, strict=True)


def test_bad_address_rejected():
    t = validate_trace([CeEvent(1, D, CellAddress(0, 18, 0, 0, 0, 0), ErrorBitmap(1))], META)
    assert len(t.rejected) == 1


def _oracle(events):
    """Sort by (dimm, ts, ce before ue); a UE is sudden iff its DIMM had no earlier-or-equal CE."""
    out = []
    for d in sorted({e.dimm for e in events}):
        mine = [e for e in events if e.dimm == d]
        mine.sort(key=lambda e: (e.timestamp, e.kind != "ce"))
        for e in mine:
            if e.kind == "ue":
                prior = any(c.kind == "ce" and (c.timestamp, 0) < (e.timestamp, 1) for c in mine)
                out.append((d, e.timestamp, "ue", not prior))
            else:
                out.append((d, e.timestamp, "ce", None))
    return out


def test_shuffled_trace_matches_sort_oracle(rng):
    events, meta = random_events(rng, 12, 1000, ue_prob=0.1)
    shuffled = events[:]
    rng.shuffle(shuffled)
    t = validate_trace(shuffled, meta)
    got = [(e.dimm, e.timestamp, e.kind, e.sudden if e.kind == "ue" else None) for e in t.events]
    assert sorted(got, key=lambda r: (r[0], r[1], r[2])) == got
    assert sorted(got, key=str) == sorted(_oracle(events), key=str)


def test_validate_is_idempotent_and_order_free(rng):
    events, meta = random_events(rng, 5, 400, ue_prob=0.1)
    a = validate_trace(events, meta)
    b = validate_trace(list(a.events), meta)
    rng.shuffle(events)
    c = validate_trace(events, meta)
    assert a.events == b.events == c.events


def test_filter_predictable_population_oracle(rng):
    events, meta = random_events(rng, 100, 300, ue_prob=0.4)
    t = validate_trace(events, meta)
    kept = filter_predictable_population(t)
    with_ce = {d for d in t.dimms() if any(e.dimm == d and e.kind == "ce" for e in t.events)}
    assert set(kept.dimms()) == with_ce
    assert all(e.dimm in with_ce for e in kept.events)
    assert len(kept.events) == sum(e.dimm in with_ce for e in t.events)


def test_jsonl_roundtrip(tmp_path, rng):
    events, meta = random_events(rng, 4, 200, ue_prob=0.1)
    t = validate_trace(events, meta)
    write_trace_jsonl(tmp_path / "t.jsonl", t.events)
    write_meta(tmp_path / "m.json", meta)
    raw = read_trace_jsonl(tmp_path / "t.jsonl")
    assert [event_to_record(e) for e in raw] == [event_to_record(e) for e in t.events]
    assert load_trace(tmp_path / "t.jsonl", tmp_path / "m.json").events == t.events


def test_x8_msb_bitmap():
    b = ErrorBitmap.from_hex("8000000000000000", 8)
    assert b.bits() == [(0, 7)]
    with pytest.raises(TraceError):
        ErrorBitmap.from_hex("8000000000000000", 4)


def test_bitmap_layout():
    b = ErrorBitmap.from_bits([(0, 1), (4, 3)])
    assert b.beats[0] == 0b10 and b.beats[4] == 0b1000
    assert b.to_hex() == "0200000008000000"


@settings(max_examples=300)
@given(st.integers(0, 2 ** 64 - 1))
def test_hex_roundtrip_x8(value):
    b = ErrorBitmap(value, 8)
    assert ErrorBitmap.from_hex(b.to_hex(), 8) == b
    assert ErrorBitmap.from_bits(b.bits(), 8) == b


def test_window_config_validation():
    WindowConfig(lead_ms=3 * 3_600_000)
    with pytest.raises(TraceError):
        WindowConfig(lead_ms=3 * 3_600_000 + 1)
    with pytest.raises(TraceError):
        WindowConfig(lead_ms=0)


def test_record_roundtrip_ue_without_cell():
    ue = UeEvent(5, D)
    assert record_to_event(event_to_record(ue)) == ue
    assert DimmId.parse(str(D)) == D
