"""Parsers from external log shapes into canonical trace events.

Two inputs are understood: the canonical JSON Lines trace and CSV logs whose
columns are named through a column map. Bad lines never abort a parse; they
come back as ``RawLogLine`` rejects with line/column diagnostics, and only a
reject rate above ``reject_ceiling`` is fatal.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

from .trace import (
    DQ_WIDTHS,
    CeEvent,
    CellAddress,
    DimmId,
    DimmMeta,
    ErrorBitmap,
    Event,
    TraceError,
    UeEvent,
    _width_mask,
    record_to_event,
)

CSV_FIELDS = ("timestamp", "server", "socket", "channel", "slot",
              "rank", "device", "bank_group", "bank", "row", "column", "bitmap")
OPTIONAL_FIELDS = ("kind", "count", "data_width")


class IngestError(ValueError):
    pass


@dataclass
class RawLogLine:
    source: str
    line: int
    text: str
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class IngestResult:
    events: list[Event] = field(default_factory=list)
    rejects: list[RawLogLine] = field(default_factory=list)
    lines: int = 0

    @property
    def reject_rate(self) -> float:
        return len(self.rejects) / self.lines if self.lines else 0.0


def decode_bitmap(text: str, width: str | int = "x4") -> ErrorBitmap:
    """Decode a 16-hex-digit beat-major bitmap; beat 0 is the leading byte."""
    dq_width = DQ_WIDTHS[width] if isinstance(width, str) else int(width)
    if not isinstance(text, str) or len(text) != 16 or any(c not in "0123456789abcdefABCDEF" for c in text):
        raise TraceError("malformed-hex", f"expected 16 hex digits, got {text!r}")
    value = int(text, 16)
    if value & ~_width_mask(dq_width):
        raise TraceError("out-of-width", f"{text} sets bits outside x{dq_width}")
    return ErrorBitmap(value, dq_width)


def encode_bitmap(bitmap: ErrorBitmap) -> str:
    return bitmap.to_hex()


def _check_ceiling(result: IngestResult, ceiling: float) -> IngestResult:
    if result.lines and result.reject_rate > ceiling:
        raise IngestError(
            f"{len(result.rejects)}/{result.lines} lines rejected "
            f"(rate {result.reject_rate:.3f} > ceiling {ceiling})"
        )
    return result


def _read_text(source) -> tuple[str, str]:
    if isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
        name = str(source)
    elif isinstance(source, bytes):
        raw, name = source, "<bytes>"
    else:
        data = source.read()
        raw = data if isinstance(data, bytes) else data.encode("utf-8", "surrogatepass")
        name = getattr(source, "name", "<stream>")
    return raw.decode("utf-8", errors="replace"), name


def parse_jsonl_trace(source, reject_ceiling: float = 1.0, widths: dict[DimmId, str] | None = None) -> IngestResult:
    text, name = _read_text(source)
    result = IngestResult()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        result.lines += 1
        try:
            rec = json.loads(line)
            event = record_to_event(rec)
            _check_width(event, widths)
        except json.JSONDecodeError as exc:
            result.rejects.append(RawLogLine(name, lineno, line, [f"line {lineno} col {exc.colno}: {exc.msg}"]))
            continue
        except (TraceError, TypeError, ValueError, AttributeError) as exc:
            result.rejects.append(RawLogLine(name, lineno, line, [f"line {lineno}: {exc}"]))
            continue
        result.events.append(event)
    return _check_ceiling(result, reject_ceiling)


def _check_width(event: Event, widths: dict[DimmId, str] | None) -> None:
    if widths is None or not isinstance(event, CeEvent):
        return
    width = widths.get(event.dimm)
    if width is not None:
        decode_bitmap(event.bitmap.to_hex(), width)
        if not event.bitmap:
            raise TraceError("malformed-bitmap", "CE bitmap has no set bits")


def _parse_ts(value: str, fmt: str) -> int:
    if fmt == "ms":
        return int(value)
    if fmt == "s":
        return int(round(float(value) * 1000))
    if fmt == "iso":
        dt = datetime.fromisoformat(value.replace("Z", "+00:00"))
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return int(round(dt.timestamp() * 1000))
    raise IngestError(f"unknown timestamp format {fmt!r}")


def parse_csv_trace(
    source,
    column_map: dict[str, str] | None = None,
    meta: Iterable[DimmMeta] | None = None,
    default_width: str = "x4",
    timestamp_format: str = "ms",
    reject_ceiling: float = 1.0,
) -> IngestResult:
    """Parse a CSV log with a header row.

    ``column_map`` maps canonical field names (``CSV_FIELDS`` plus optional
    ``kind``, ``count``, ``data_width``) to CSV header names; unmapped fields
    are looked up under their canonical name. Each physical line is one
    record. Bitmap width comes from ``meta``, else a ``data_width`` column,
    else ``default_width``.
    """
    text, name = _read_text(source)
    cmap = {f: f for f in CSV_FIELDS + OPTIONAL_FIELDS}
    cmap.update(column_map or {})
    widths = {m.dimm: m.data_width for m in meta} if meta is not None else {}
    result = IngestResult()
    lines = text.splitlines()
    if not lines:
        return result
    try:
        header = next(csv.reader([lines[0]]))
    except csv.Error as exc:
        raise IngestError(f"{name}: unreadable header: {exc}") from None
    pos = {h.strip(): i for i, h in enumerate(header)}
    missing = [f for f in CSV_FIELDS if cmap[f] not in pos]
    if missing:
        raise IngestError(f"{name}: header lacks columns for {missing}")

    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        result.lines += 1
        try:
            row = next(csv.reader([line]))
        except csv.Error as exc:
            result.rejects.append(RawLogLine(name, lineno, line, [f"line {lineno}: {exc}"]))
            continue
        diags: list[str] = []
        event = _csv_event(row, pos, cmap, widths, default_width, timestamp_format, lineno, diags)
        if event is None:
            result.rejects.append(RawLogLine(name, lineno, line, diags))
        else:
            result.events.append(event)
    return _check_ceiling(result, reject_ceiling)


def _csv_event(row, pos, cmap, widths, default_width, ts_format, lineno, diags) -> Event | None:
    def field_(name, required=True):
        col = pos.get(cmap[name])
        if col is None or col >= len(row):
            if required:
                diags.append(f"line {lineno} col {(col or 0) + 1}: missing {name}")
            return None, col
        return row[col].strip(), col

    def as_int(name):
        value, col = field_(name)
        if value is None:
            return None
        try:
            n = int(value)
        except ValueError:
            diags.append(f"line {lineno} col {col + 1}: {name} not an integer: {value!r}")
            return None
        if n < 0:
            diags.append(f"line {lineno} col {col + 1}: {name} negative: {n}")
            return None
        return n

    kind, _ = field_("kind", required=False)
    kind = (kind or "ce").lower()
    ts_text, ts_col = field_("timestamp")
    ts = None
    if ts_text is not None:
        try:
            ts = _parse_ts(ts_text, ts_format)
        except (ValueError, OverflowError):
            diags.append(f"line {lineno} col {ts_col + 1}: bad timestamp {ts_text!r}")
    server, _ = field_("server")
    addr_keys = ("rank", "device", "bank_group", "bank", "row", "column")
    no_cell = kind == "ue" and all(not (field_(k, required=False)[0] or "") for k in addr_keys)
    keys = ("socket", "channel", "slot") + (() if no_cell else addr_keys)
    ints = {k: as_int(k) for k in keys}
    if kind not in ("ce", "ue"):
        diags.append(f"line {lineno}: unknown kind {kind!r}")
    if diags or server is None or ts is None:
        return None
    try:
        dimm = DimmId(server, ints["socket"], ints["channel"], ints["slot"])
        cell = None if no_cell else CellAddress(*(ints[k] for k in addr_keys))
    except TraceError as exc:
        diags.append(f"line {lineno}: {exc}")
        return None
    if kind == "ue":
        return UeEvent(ts, dimm, cell)

    width_text, _ = field_("data_width", required=False)
    width = widths.get(dimm) or width_text or default_width
    if width not in DQ_WIDTHS:
        diags.append(f"line {lineno}: unknown data width {width!r}")
        return None
    hex_text, hex_col = field_("bitmap")
    try:
        bitmap = decode_bitmap(hex_text, width)
    except TraceError as exc:
        diags.append(f"line {lineno} col {hex_col + 1}: {exc}")
        return None
    if not bitmap:
        diags.append(f"line {lineno} col {hex_col + 1}: malformed-bitmap: CE bitmap has no set bits")
        return None
    count = 1
    count_text, count_col = field_("count", required=False)
    if count_text:
        try:
            count = int(count_text)
            if count < 1:
                raise ValueError
        except ValueError:
            diags.append(f"line {lineno} col {count_col + 1}: count must be a positive integer")
            return None
    return CeEvent(ts, dimm, cell, bitmap, count)


def write_csv_trace(path_or_buf, events: Iterable[Event], column_map: dict[str, str] | None = None) -> None:
    """Write events as CSV under (optionally renamed) canonical columns."""
    cmap = {f: f for f in CSV_FIELDS + ("kind", "count")}
    cmap.update(column_map or {})
    cols = ["kind", *CSV_FIELDS, "count"]
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([cmap[c] for c in cols])
        for e in events:
            c = e.cell
            addr = [c.rank, c.device, c.bank_group, c.bank, c.row, c.column] if c else [""] * 6
            d = e.dimm
            if isinstance(e, CeEvent):
                w.writerow(["ce", e.timestamp, d.server_id, d.socket, d.channel, d.slot, *addr,
                            e.bitmap.to_hex(), e.count])
            else:
                w.writerow(["ue", e.timestamp, d.server_id, d.socket, d.channel, d.slot, *addr, "", ""])
    finally:
        if own:
            fh.close()


def load_column_map(path: str | Path) -> dict[str, str]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise IngestError("column map must be a JSON object of strings")
    unknown = set(data) - set(CSV_FIELDS + OPTIONAL_FIELDS)
    if unknown:
        raise IngestError(f"column map has unknown fields {sorted(unknown)}")
    return data


def csv_text(events: Iterable[Event], column_map: dict[str, str] | None = None) -> str:
    buf = io.StringIO()
    write_csv_trace(buf, events, column_map)
    return buf.getvalue()
