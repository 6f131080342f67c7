"""Canonical error-trace types, window configuration and trace validation.

Timestamps are integer milliseconds since the epoch (UTC). A trace is a flat
sequence of correctable (CE) and uncorrectable (UE) events, each tagged with
the DIMM it was observed on; static DIMM attributes live in ``DimmMeta``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

MINUTE = 60_000
HOUR = 60 * MINUTE
DAY = 24 * HOUR

BEATS = 8
DQ_WIDTHS = {"x4": 4, "x8": 8}
# 72-bit bus: 64 data + 8 ECC bits
DEVICES_PER_RANK = {"x4": 18, "x8": 9}
PLATFORMS = ("purley", "whitley", "k920", "custom")


class TraceError(ValueError):
    """Raised for records that violate the trace model."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass(frozen=True, order=True)
class DimmId:
    server_id: str
    socket: int = 0
    channel: int = 0
    slot: int = 0

    def __post_init__(self):
        if min(self.socket, self.channel, self.slot) < 0:
            raise TraceError("bad-dimm", f"negative component in {self}")

    def __str__(self) -> str:
        return f"{self.server_id}/{self.socket}/{self.channel}/{self.slot}"

    @classmethod
    def parse(cls, text: str) -> "DimmId":
        server, socket, channel, slot = text.rsplit("/", 3)
        return cls(server, int(socket), int(channel), int(slot))


@dataclass(frozen=True, order=True)
class CellAddress:
    rank: int
    device: int
    bank_group: int
    bank: int
    row: int
    column: int

    def validate(self, devices_per_rank: int | None = None, ddr4: bool = True) -> None:
        if min(self.rank, self.device, self.bank_group, self.bank, self.row, self.column) < 0:
            raise TraceError("bad-address", f"negative component in {self}")
        if devices_per_rank is not None and self.device >= devices_per_rank:
            raise TraceError("bad-address", f"device {self.device} >= {devices_per_rank}")
        if ddr4 and (self.bank_group > 3 or self.bank > 3):
            raise TraceError("bad-address", f"bank_group/bank out of DDR4 range in {self}")


@dataclass(frozen=True)
class ErrorBitmap:
    """Erroneous bits of one device over a burst of 8 beats.

    Stored as a 64-bit integer, beat-major with beat 0 in the most significant
    byte; within a beat byte, bit ``k`` is DQ ``k``.
    """

    value: int
    dq_width: int = 4

    def __post_init__(self):
        if not 0 <= self.value < 1 << 64:
            raise TraceError("malformed-bitmap", f"value {self.value:#x} out of 64-bit range")
        if self.dq_width not in (4, 8):
            raise TraceError("malformed-bitmap", f"unsupported dq width {self.dq_width}")
        if self.value & ~_width_mask(self.dq_width):
            raise TraceError(
                "malformed-bitmap", f"{self.value:016x} has bits outside x{self.dq_width}"
            )

    @property
    def beats(self) -> tuple[int, ...]:
        return tuple((self.value >> (8 * (BEATS - 1 - b))) & 0xFF for b in range(BEATS))

    @classmethod
    def from_beats(cls, beats: Sequence[int], dq_width: int = 4) -> "ErrorBitmap":
        if len(beats) != BEATS:
            raise TraceError("malformed-bitmap", f"expected 8 beats, got {len(beats)}")
        value = 0
        for mask in beats:
            if not 0 <= mask <= 0xFF:
                raise TraceError("malformed-bitmap", f"beat mask {mask} out of range")
            value = (value << 8) | mask
        return cls(value, dq_width)

    @classmethod
    def from_bits(cls, bits: Iterable[tuple[int, int]], dq_width: int = 4) -> "ErrorBitmap":
        """Build from ``(beat, dq)`` pairs."""
        value = 0
        for beat, dq in bits:
            if not (0 <= beat < BEATS and 0 <= dq < dq_width):
                raise TraceError("malformed-bitmap", f"bit (beat={beat}, dq={dq}) out of range")
            value |= 1 << (8 * (BEATS - 1 - beat) + dq)
        return cls(value, dq_width)

    @classmethod
    def from_hex(cls, text: str, dq_width: int = 4) -> "ErrorBitmap":
        if not isinstance(text, str) or len(text) != 16:
            raise TraceError("malformed-hex", f"expected 16 hex digits, got {text!r}")
        try:
            value = int(text, 16)
        except ValueError:
            raise TraceError("malformed-hex", f"not hexadecimal: {text!r}") from None
        if text.strip() != text or text.startswith(("+", "-")) or "_" in text:
            raise TraceError("malformed-hex", f"not hexadecimal: {text!r}")
        return cls(value, dq_width)

    def to_hex(self) -> str:
        return f"{self.value:016x}"

    def bits(self) -> list[tuple[int, int]]:
        return [
            (b, dq)
            for b, mask in enumerate(self.beats)
            for dq in range(self.dq_width)
            if mask >> dq & 1
        ]

    def __bool__(self) -> bool:
        return self.value != 0

    def __or__(self, other: "ErrorBitmap") -> "ErrorBitmap":
        return ErrorBitmap(self.value | other.value, max(self.dq_width, other.dq_width))


def _width_mask(dq_width: int) -> int:
    byte = (1 << dq_width) - 1
    return int.from_bytes(bytes([byte]) * BEATS, "big")


@dataclass(frozen=True)
class CeEvent:
    timestamp: int
    dimm: DimmId
    cell: CellAddress
    bitmap: ErrorBitmap
    count: int = 1

    kind = "ce"

    def __post_init__(self):
        if self.count < 1:
            raise TraceError("bad-count", f"count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class UeEvent:
    timestamp: int
    dimm: DimmId
    cell: CellAddress | None = None
    sudden: bool = False

    kind = "ue"


Event = Union[CeEvent, UeEvent]


@dataclass(frozen=True)
class DimmMeta:
    dimm: DimmId
    manufacturer: str = "unknown"
    data_width: str = "x4"
    frequency: int = 2933
    chip_process: str = "unknown"
    platform: str = "custom"

    def __post_init__(self):
        if self.data_width not in DQ_WIDTHS:
            raise TraceError("bad-meta", f"data_width must be x4 or x8, got {self.data_width!r}")
        if self.platform not in PLATFORMS:
            raise TraceError("bad-meta", f"unknown platform {self.platform!r}")

    @property
    def dq_width(self) -> int:
        return DQ_WIDTHS[self.data_width]

    @property
    def devices_per_rank(self) -> int:
        return DEVICES_PER_RANK[self.data_width]


@dataclass(frozen=True)
class WindowConfig:
    """Observation, lead and prediction windows, all in milliseconds."""

    observation_ms: int = 5 * DAY
    lead_ms: int = 3 * HOUR
    prediction_ms: int = 30 * DAY
    sample_interval_ms: int = MINUTE
    prediction_interval_ms: int = 5 * MINUTE

    def __post_init__(self):
        values = (
            self.observation_ms,
            self.lead_ms,
            self.prediction_ms,
            self.sample_interval_ms,
            self.prediction_interval_ms,
        )
        if min(values) <= 0:
            raise TraceError("bad-window", f"all windows must be positive: {self}")
        if self.lead_ms > 3 * HOUR:
            raise TraceError("bad-window", "lead time must lie in (0, 3h]")
        if self.sample_interval_ms > self.prediction_interval_ms:
            raise TraceError("bad-window", "sample interval exceeds prediction interval")


def _cell_key(cell: CellAddress | None) -> tuple:
    if cell is None:
        return (-1,) * 6
    return (cell.rank, cell.device, cell.bank_group, cell.bank, cell.row, cell.column)


def _event_key(event: Event):
    # total order so shuffled inputs always validate to the same sequence
    if isinstance(event, CeEvent):
        return (event.dimm, event.timestamp, 0, _cell_key(event.cell), event.bitmap.value, event.count)
    return (event.dimm, event.timestamp, 1, _cell_key(event.cell), 0, 0)


def time_order_key(event: Event):
    """Order used for trace files: by time first, ties broken like ``_event_key``."""
    k = _event_key(event)
    return (k[1], k[0]) + k[2:]


@dataclass(frozen=True)
class Rejection:
    index: int
    kind: str
    message: str


@dataclass
class ValidatedTrace:
    events: tuple[Event, ...] = ()
    meta: dict[DimmId, DimmMeta] = field(default_factory=dict)
    rejected: tuple[Rejection, ...] = ()
    dropped: int = 0

    def __post_init__(self):
        self._by_dimm = None

    def __len__(self) -> int:
        return len(self.events)

    @property
    def ces(self) -> list[CeEvent]:
        return [e for e in self.events if isinstance(e, CeEvent)]

    @property
    def ues(self) -> list[UeEvent]:
        return [e for e in self.events if isinstance(e, UeEvent)]

    @property
    def span(self) -> tuple[int, int] | None:
        if not self.events:
            return None
        stamps = [e.timestamp for e in self.events]
        return min(stamps), max(stamps)

    def by_dimm(self) -> dict[DimmId, tuple[list[CeEvent], list[UeEvent]]]:
        """Per-DIMM (CEs, UEs), each time-ordered; DIMMs in sorted order."""
        if self._by_dimm is None:
            groups: dict[DimmId, tuple[list, list]] = {}
            for e in self.events:
                ces, ues = groups.setdefault(e.dimm, ([], []))
                (ces if isinstance(e, CeEvent) else ues).append(e)
            self._by_dimm = groups
        return self._by_dimm

    def dimms(self) -> list[DimmId]:
        return sorted(self.by_dimm())

    def ue_dimms(self) -> set[DimmId]:
        return {d for d, (_, ues) in self.by_dimm().items() if ues}


def validate_trace(
    events: Iterable[Event],
    meta: Iterable[DimmMeta],
    strict: bool = False,
) -> ValidatedTrace:
    """Sort events by (dimm, timestamp), check them against the DIMM metadata
    and recompute the ``sudden`` flag of every UE.

    Records referencing an unknown DIMM (``missing-meta``) or carrying bits
    outside the DIMM's DQ width (``malformed-bitmap``) are rejected; with
    ``strict=True`` the first rejection raises ``TraceError`` instead.
    """
    meta_map: dict[DimmId, DimmMeta] = {}
    for m in meta:
        meta_map[m.dimm] = m

    kept: list[Event] = []
    rejected: list[Rejection] = []
    for i, event in enumerate(events):
        problem = _check_event(event, meta_map)
        if problem is not None:
            if strict:
                raise TraceError(*problem)
            rejected.append(Rejection(i, *problem))
            continue
        width = meta_map[event.dimm].dq_width
        if isinstance(event, CeEvent) and event.bitmap.dq_width != width:
            event = replace(event, bitmap=ErrorBitmap(event.bitmap.value, width))
        kept.append(event)

    kept.sort(key=_event_key)

    out: list[Event] = []
    seen_ce: set[DimmId] = set()
    for event in kept:
        if isinstance(event, CeEvent):
            seen_ce.add(event.dimm)
            out.append(event)
        else:
            sudden = event.dimm not in seen_ce
            if event.sudden != sudden:
                event = UeEvent(event.timestamp, event.dimm, event.cell, sudden)
            out.append(event)
    return ValidatedTrace(tuple(out), meta_map, tuple(rejected), dropped=len(rejected))


def _check_event(event: Event, meta_map: dict[DimmId, DimmMeta]) -> tuple[str, str] | None:
    m = meta_map.get(event.dimm)
    if m is None:
        return ("missing-meta", f"no DimmMeta for {event.dimm}")
    if isinstance(event, CeEvent):
        if event.bitmap.value & ~_width_mask(m.dq_width):
            return ("malformed-bitmap", f"{event.bitmap.to_hex()} has bits outside {m.data_width}")
        if not event.bitmap:
            return ("malformed-bitmap", "CE bitmap has no set bits")
    cell = event.cell
    if cell is not None:
        try:
            cell.validate(m.devices_per_rank)
        except TraceError as exc:
            return (exc.kind, str(exc))
    return None


def filter_predictable_population(trace: ValidatedTrace) -> ValidatedTrace:
    """Keep only DIMMs that logged at least one CE.

    A DIMM without any CE can only fail through sudden UEs and offers no
    predictive history, so it leaves the modelling population.
    """
    keep = {d for d, (ces, _) in trace.by_dimm().items() if ces}
    events = tuple(e for e in trace.events if e.dimm in keep)
    meta = {d: m for d, m in trace.meta.items() if d in keep}
    return ValidatedTrace(events, meta, trace.rejected, trace.dropped)


# ---------------------------------------------------------------------------
# JSON Lines / JSON serialization

def _dimm_fields(dimm: DimmId) -> dict:
    return {"server": dimm.server_id, "socket": dimm.socket, "channel": dimm.channel, "slot": dimm.slot}


def _cell_fields(cell: CellAddress) -> dict:
    return {
        "rank": cell.rank,
        "device": cell.device,
        "bank_group": cell.bank_group,
        "bank": cell.bank,
        "row": cell.row,
        "column": cell.column,
    }


def event_to_record(event: Event) -> dict:
    rec = {"kind": event.kind, "ts": event.timestamp, **_dimm_fields(event.dimm)}
    if isinstance(event, CeEvent):
        rec.update(_cell_fields(event.cell))
        rec["bitmap"] = event.bitmap.to_hex()
        rec["count"] = event.count
    else:
        if event.cell is not None:
            rec.update(_cell_fields(event.cell))
        rec["sudden"] = event.sudden
    return rec


def _require_int(rec: dict, key: str) -> int:
    value = rec[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceError("bad-field", f"{key} must be an integer, got {value!r}")
    return value


def record_to_event(rec: dict, dq_width: int = 8) -> Event:
    """Inverse of ``event_to_record``.

    Bitmaps are decoded with ``dq_width`` (permissive by default); the DIMM's
    real width is enforced later by ``validate_trace``.
    """
    if not isinstance(rec, dict):
        raise TraceError("bad-record", "record is not a JSON object")
    try:
        kind = rec["kind"]
        dimm = DimmId(str(rec["server"]), _require_int(rec, "socket"),
                      _require_int(rec, "channel"), _require_int(rec, "slot"))
        ts = _require_int(rec, "ts")
        has_cell = "row" in rec
        cell = None
        if has_cell:
            cell = CellAddress(*(_require_int(rec, k) for k in
                                 ("rank", "device", "bank_group", "bank", "row", "column")))
        if kind == "ce":
            if cell is None:
                raise TraceError("bad-record", "CE without cell address")
            count = _require_int(rec, "count") if "count" in rec else 1
            return CeEvent(ts, dimm, cell, ErrorBitmap.from_hex(rec["bitmap"], dq_width), count)
        if kind == "ue":
            return UeEvent(ts, dimm, cell, bool(rec.get("sudden", False)))
    except KeyError as exc:
        raise TraceError("missing-field", f"missing field {exc.args[0]!r}") from None
    raise TraceError("bad-record", f"unknown event kind {kind!r}")


def dumps_event(event: Event) -> str:
    return json.dumps(event_to_record(event), sort_keys=True, separators=(",", ":"))


def write_trace_jsonl(path: str | Path, events: Iterable[Event]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(dumps_event(e))
            fh.write("\n")


def iter_trace_jsonl(path: str | Path) -> Iterator[Event]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield record_to_event(json.loads(line))
            except (json.JSONDecodeError, TraceError) as exc:
                raise TraceError("bad-record", f"{path}:{lineno}: {exc}") from None


def read_trace_jsonl(path: str | Path) -> list[Event]:
    return list(iter_trace_jsonl(path))


def meta_to_record(m: DimmMeta) -> dict:
    return {
        **_dimm_fields(m.dimm),
        "manufacturer": m.manufacturer,
        "data_width": m.data_width,
        "frequency": m.frequency,
        "chip_process": m.chip_process,
        "platform": m.platform,
    }


def record_to_meta(rec: dict) -> DimmMeta:
    try:
        dimm = DimmId(str(rec["server"]), int(rec["socket"]), int(rec["channel"]), int(rec["slot"]))
        return DimmMeta(
            dimm,
            str(rec.get("manufacturer", "unknown")),
            str(rec.get("data_width", "x4")),
            int(rec.get("frequency", 2933)),
            str(rec.get("chip_process", "unknown")),
            str(rec.get("platform", "custom")),
        )
    except KeyError as exc:
        raise TraceError("missing-field", f"meta record missing {exc.args[0]!r}") from None


def write_meta(path: str | Path, meta: Iterable[DimmMeta]) -> None:
    records = [meta_to_record(m) for m in sorted(meta, key=lambda m: m.dimm)]
    Path(path).write_text(json.dumps(records, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_meta(path: str | Path) -> list[DimmMeta]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise TraceError("bad-meta", "meta file must hold a JSON array")
    return [record_to_meta(r) for r in data]


def load_trace(trace_path: str | Path, meta_path: str | Path, strict: bool = False) -> ValidatedTrace:
    return validate_trace(read_trace_jsonl(trace_path), read_meta(meta_path), strict=strict)


def group_by_dimm(events: Iterable[Event]) -> dict[DimmId, list[Event]]:
    groups: dict[DimmId, list[Event]] = defaultdict(list)
    for e in events:
        groups[e.dimm].append(e)
    return groups
