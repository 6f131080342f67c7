"""Fault-mode diagnosis in the DRAM hierarchy and DQ/beat error-bit statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

from .trace import BEATS, DAY, CeEvent, DimmId, ErrorBitmap

FAULT_MODES = ("cell", "row", "column", "bank", "single_device", "multi_device")
SCOPES = ("none", "single_device", "multi_device")


@dataclass(frozen=True)
class FaultThresholds:
    cell_min_ces: int = 2
    row_min_distinct_columns: int = 2
    column_min_distinct_rows: int = 2
    analysis_window_ms: int = 5 * DAY

    def __post_init__(self):
        if min(self.cell_min_ces, self.row_min_distinct_columns,
               self.column_min_distinct_rows, self.analysis_window_ms) < 1:
            raise ValueError(f"fault thresholds must all be >= 1: {self}")


@dataclass(frozen=True)
class FaultDiagnosis:
    dimm: DimmId | None
    cell_faults: int = 0
    row_faults: int = 0
    column_faults: int = 0
    bank_faults: int = 0
    device_scope: str = "none"

    def modes(self) -> set[str]:
        found = {
            name for name, n in (
                ("cell", self.cell_faults),
                ("row", self.row_faults),
                ("column", self.column_faults),
                ("bank", self.bank_faults),
            ) if n > 0
        }
        if self.device_scope != "none":
            found.add(self.device_scope)
        return found

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dimm"] = str(self.dimm) if self.dimm is not None else None
        return d


@dataclass(frozen=True)
class BitPatternStats:
    dq_count: int = 0
    beat_count: int = 0
    dq_interval: int = 0
    beat_interval: int = 0


def _spread(mask: int, mode: str) -> int:
    idx = [i for i in range(8) if mask >> i & 1]
    if len(idx) <= 1:
        return 0
    if mode == "span":
        return idx[-1] - idx[0]
    if mode == "gap":
        return max(b - a for a, b in zip(idx, idx[1:]))
    raise ValueError(f"unknown interval mode {mode!r}")


_SPAN = [_spread(m, "span") for m in range(256)]
_GAP = [_spread(m, "gap") for m in range(256)]


def _masks(value: int) -> tuple[int, int]:
    """Return (dq mask, beat mask) of a 64-bit beat-major bitmap."""
    dq = value | value >> 32
    dq |= dq >> 16
    dq = (dq | dq >> 8) & 0xFF
    beat = 0
    for b in range(BEATS):
        if value >> (8 * (BEATS - 1 - b)) & 0xFF:
            beat |= 1 << b
    return dq, beat


def bit_pattern_stats(bitmap: ErrorBitmap | int, interval: str = "span") -> BitPatternStats:
    """Count erroneous DQs and beats and measure their spread.

    With ``interval="span"`` the interval is max - min of the erroneous
    indices; ``"gap"`` takes the largest gap between adjacent ones instead.
    """
    value = bitmap if isinstance(bitmap, int) else bitmap.value
    if not value:
        return BitPatternStats()
    table = _SPAN if interval == "span" else _GAP
    if interval not in ("span", "gap"):
        raise ValueError(f"unknown interval mode {interval!r}")
    dq, beat = _masks(value)
    return BitPatternStats(dq.bit_count(), beat.bit_count(), table[dq], table[beat])


def _in_window(ts: int, window: tuple[int, int] | None) -> bool:
    return window is None or window[0] < ts <= window[1]


def aggregate_bit_patterns(
    events: Iterable[CeEvent],
    window: tuple[int, int] | None = None,
    interval: str = "span",
) -> BitPatternStats:
    """Stats of the bitwise OR of all CE bitmaps with timestamp in ``(start, end]``."""
    acc = 0
    for e in events:
        if isinstance(e, CeEvent) and _in_window(e.timestamp, window):
            acc |= e.bitmap.value
    return bit_pattern_stats(acc, interval)


def classify_faults(
    events: Iterable[CeEvent],
    thresholds: FaultThresholds = FaultThresholds(),
    window: tuple[int, int] | None = None,
    dimm: DimmId | None = None,
) -> FaultDiagnosis:
    """Diagnose cell, row, column and bank faults of one DIMM.

    A cell is faulty once its summed CE count reaches ``cell_min_ces``; a row
    (column) once it shows errors at ``row_min_distinct_columns``
    (``column_min_distinct_rows``) distinct columns (rows). A bank is faulty
    when it holds both a faulty row and a faulty column. Bank group is part
    of the bank key, and every key is scoped to one (rank, device).
    """
    cells: dict[tuple, int] = {}
    row_cols: dict[tuple, set] = {}
    col_rows: dict[tuple, set] = {}
    devices: set[tuple[int, int]] = set()
    for e in events:
        if not isinstance(e, CeEvent) or not _in_window(e.timestamp, window):
            continue
        if dimm is None:
            dimm = e.dimm
        c = e.cell
        bank = (c.rank, c.device, c.bank_group, c.bank)
        cells[bank + (c.row, c.column)] = cells.get(bank + (c.row, c.column), 0) + e.count
        row_cols.setdefault(bank + (c.row,), set()).add(c.column)
        col_rows.setdefault(bank + (c.column,), set()).add(c.row)
        devices.add((c.rank, c.device))

    cell_faults = sum(1 for n in cells.values() if n >= thresholds.cell_min_ces)
    bad_rows = [k for k, cols in row_cols.items() if len(cols) >= thresholds.row_min_distinct_columns]
    bad_cols = [k for k, rows in col_rows.items() if len(rows) >= thresholds.column_min_distinct_rows]
    banks = {k[:4] for k in bad_rows} & {k[:4] for k in bad_cols}
    scope = SCOPES[min(len(devices), 2)]
    return FaultDiagnosis(dimm, cell_faults, len(bad_rows), len(bad_cols), len(banks), scope)


def relative_ue_rate(
    diagnoses: Iterable[FaultDiagnosis] | Mapping[DimmId, FaultDiagnosis],
    ue_dimms: Iterable[DimmId],
) -> dict[str, tuple[float, int]]:
    """Fraction of DIMMs showing each fault mode that also saw a UE.

    Returns ``{mode: (rate, population)}``; modes nobody exhibits are absent.
    """
    if isinstance(diagnoses, Mapping):
        diagnoses = diagnoses.values()
    ue = set(ue_dimms)
    pop = {m: 0 for m in FAULT_MODES}
    hit = {m: 0 for m in FAULT_MODES}
    for diag in diagnoses:
        failed = diag.dimm in ue
        for mode in diag.modes():
            pop[mode] += 1
            hit[mode] += failed
    return {m: (hit[m] / pop[m], pop[m]) for m in FAULT_MODES if pop[m]}


def diagnose_trace(trace, thresholds: FaultThresholds = FaultThresholds(),
                   window: tuple[int, int] | None = None) -> dict[DimmId, FaultDiagnosis]:
    """``classify_faults`` over every DIMM of a validated trace that has CEs."""
    out = {}
    for d, (ces, _) in sorted(trace.by_dimm().items()):
        if ces:
            out[d] = classify_faults(ces, thresholds, window, dimm=d)
    return out
