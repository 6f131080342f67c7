"""Windowed feature extraction and UE labelling, in batch and stream form.

A sample is taken for a DIMM at every prediction tick ``t`` after its first
CE: the features summarize only events with timestamp <= t, and the label is
positive iff a UE falls in ``[t + lead, t + lead + prediction]``.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import heapq
import json
from collections import Counter, deque
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .faults import FaultThresholds, bit_pattern_stats, classify_faults
from .trace import (
    DAY,
    HOUR,
    MINUTE,
    PLATFORMS,
    CeEvent,
    DimmId,
    DimmMeta,
    Event,
    UeEvent,
    ValidatedTrace,
    WindowConfig,
)

KINDS = ("count", "rate", "categorical-encoded", "flag")
SOURCES = ("ce_stats", "fault_modes", "bit_patterns", "static_meta", "events")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    source: str


def _span_label(ms: int) -> str:
    for unit, size in (("d", DAY), ("h", HOUR), ("m", MINUTE), ("s", 1000)):
        if ms % size == 0:
            return f"{ms // size}{unit}"
    return f"{ms}ms"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature layout plus the knobs that shape the values."""

    sub_windows_ms: tuple[int, ...] = (MINUTE, HOUR, DAY, 5 * DAY)
    storm_threshold: int = 10
    storm_window_ms: int = HOUR
    manufacturers: tuple[str, ...] = ("A", "B", "C", "D")
    chip_processes: tuple[str, ...] = ("1x", "1y", "1z")
    interval: str = "span"

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")

    @cached_property
    def features(self) -> tuple[FeatureSpec, ...]:
        fs = [FeatureSpec(f"ce_count_{_span_label(w)}", "count", "ce_stats") for w in self.sub_windows_ms]
        fs.append(FeatureSpec("ce_rate_per_day", "rate", "ce_stats"))
        for what in ("cells", "rows", "columns", "banks", "devices"):
            fs.append(FeatureSpec(f"distinct_{what}", "count", "ce_stats"))
        for mode in ("cell", "row", "column", "bank"):
            fs.append(FeatureSpec(f"{mode}_faults", "count", "fault_modes"))
        fs.append(FeatureSpec("single_device", "flag", "fault_modes"))
        fs.append(FeatureSpec("multi_device", "flag", "fault_modes"))
        for stat in ("dq_count", "beat_count", "dq_interval", "beat_interval"):
            fs.append(FeatureSpec(stat, "count", "bit_patterns"))
        fs.append(FeatureSpec("max_event_dq_count", "count", "bit_patterns"))
        fs.append(FeatureSpec("max_event_beat_count", "count", "bit_patterns"))
        fs.append(FeatureSpec("ce_storm", "flag", "events"))
        for m in self.manufacturers + ("other",):
            fs.append(FeatureSpec(f"manufacturer_{m}", "categorical-encoded", "static_meta"))
        for p in PLATFORMS:
            fs.append(FeatureSpec(f"platform_{p}", "categorical-encoded", "static_meta"))
        for p in self.chip_processes + ("other",):
            fs.append(FeatureSpec(f"process_{p}", "categorical-encoded", "static_meta"))
        fs.append(FeatureSpec("data_width", "count", "static_meta"))
        fs.append(FeatureSpec("frequency", "rate", "static_meta"))
        return tuple(fs)

    @cached_property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def __len__(self) -> int:
        return len(self.features)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sub_windows_ms"] = list(self.sub_windows_ms)
        d["manufacturers"] = list(self.manufacturers)
        d["chip_processes"] = list(self.chip_processes)
        d["features"] = [asdict(f) for f in self.features]
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        schema = cls(
            tuple(d["sub_windows_ms"]),
            d["storm_threshold"],
            d["storm_window_ms"],
            tuple(d["manufacturers"]),
            tuple(d["chip_processes"]),
            d["interval"],
        )
        if "hash" in d and d["hash"] != schema.hash:
            raise ValueError(f"schema hash mismatch: file says {d['hash']}, content gives {schema.hash}")
        return schema

    def save(self, path: str | Path) -> None:
        doc = {**self.to_dict(), "hash": self.hash}
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def label(t: int, ue_times: Sequence[int], cfg: WindowConfig) -> int:
    """1 iff some UE time lies in the closed interval [t + lead, t + lead + prediction]."""
    lo = t + cfg.lead_ms
    i = bisect.bisect_left(ue_times, lo)
    return int(i < len(ue_times) and ue_times[i] <= lo + cfg.prediction_ms)


def encode_static(meta: DimmMeta, schema: FeatureSchema) -> tuple[list[float], list[str]]:
    """One-hot/numeric static features and the list of fields that fell into 'other'."""
    unknown = []
    mfr = meta.manufacturer if meta.manufacturer in schema.manufacturers else "other"
    if mfr == "other":
        unknown.append(f"manufacturer={meta.manufacturer}")
    proc = meta.chip_process if meta.chip_process in schema.chip_processes else "other"
    if proc == "other":
        unknown.append(f"chip_process={meta.chip_process}")
    vals = [float(m == mfr) for m in schema.manufacturers + ("other",)]
    vals += [float(p == meta.platform) for p in PLATFORMS]
    vals += [float(p == proc) for p in schema.chip_processes + ("other",)]
    vals += [float(meta.dq_width), float(meta.frequency)]
    return vals, unknown


def dynamic_features(
    events: Iterable[CeEvent],
    t: int,
    schema: FeatureSchema,
    cfg: WindowConfig,
    thresholds: FaultThresholds,
) -> list[float]:
    obs_start = t - cfg.observation_ms
    fault_start = t - thresholds.analysis_window_ms
    windows = schema.sub_windows_ms
    counts = [0] * len(windows)
    total = storm = 0
    cells, rows, cols, banks, devices = set(), set(), set(), set(), set()
    bits = 0
    max_dq = max_beat = 0
    fault_events = []
    for e in events:
        ts = e.timestamp
        if ts > t:
            continue
        if ts > fault_start:
            fault_events.append(e)
        if ts <= obs_start:
            continue
        age = t - ts
        total += e.count
        for i, w in enumerate(windows):
            if age < w:
                counts[i] += e.count
        if age < schema.storm_window_ms:
            storm += e.count
        c = e.cell
        bank = (c.rank, c.device, c.bank_group, c.bank)
        cells.add(bank + (c.row, c.column))
        rows.add(bank + (c.row,))
        cols.add(bank + (c.column,))
        banks.add(bank)
        devices.add((c.rank, c.device))
        bits |= e.bitmap.value
        s = _event_stats(e.bitmap.value)
        max_dq = max(max_dq, s[0])
        max_beat = max(max_beat, s[1])

    diag = classify_faults(fault_events, thresholds)
    bp = bit_pattern_stats(bits, schema.interval)
    out = [float(n) for n in counts]
    out.append(total / (cfg.observation_ms / DAY))
    out += [float(len(s)) for s in (cells, rows, cols, banks, devices)]
    out += [float(diag.cell_faults), float(diag.row_faults), float(diag.column_faults), float(diag.bank_faults)]
    out += [float(diag.device_scope == "single_device"), float(diag.device_scope == "multi_device")]
    out += [float(bp.dq_count), float(bp.beat_count), float(bp.dq_interval), float(bp.beat_interval)]
    out += [float(max_dq), float(max_beat)]
    out.append(float(storm >= schema.storm_threshold))
    return out


_STATS_CACHE: dict[int, tuple[int, int]] = {}


def _event_stats(value: int) -> tuple[int, int]:
    s = _STATS_CACHE.get(value)
    if s is None:
        bp = bit_pattern_stats(value)
        s = _STATS_CACHE[value] = (bp.dq_count, bp.beat_count)
    return s


def featurize(
    events: Iterable[CeEvent],
    meta: DimmMeta,
    t: int,
    schema: FeatureSchema | None = None,
    cfg: WindowConfig = WindowConfig(),
    thresholds: FaultThresholds | None = None,
) -> np.ndarray:
    """Feature vector of one DIMM at time ``t``; events after ``t`` are ignored."""
    schema = schema or FeatureSchema()
    thresholds = thresholds or FaultThresholds(analysis_window_ms=cfg.observation_ms)
    static, _ = encode_static(meta, schema)
    return np.array(dynamic_features(events, t, schema, cfg, thresholds) + static, dtype=np.float64)


@dataclass(frozen=True)
class Sample:
    dimm: DimmId
    t: int
    features: np.ndarray
    label: int


@dataclass
class SampleSet:
    schema: FeatureSchema
    dimms: list[DimmId] = field(default_factory=list)
    times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    X: np.ndarray | None = None
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    unknown: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.X is None:
            self.X = np.zeros((0, len(self.schema)), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.dimms)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.dimms[i], int(self.times[i]), self.X[i], int(self.y[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, mask: np.ndarray) -> "SampleSet":
        idx = np.flatnonzero(mask)
        return SampleSet(self.schema, [self.dimms[i] for i in idx], self.times[idx],
                         self.X[idx], self.y[idx], dict(self.unknown))

    def select_dimms(self, dimms: Iterable[DimmId]) -> "SampleSet":
        keep = set(dimms)
        return self.subset(np.array([d in keep for d in self.dimms], dtype=bool))

    @classmethod
    def from_samples(cls, schema: FeatureSchema, samples: Sequence[Sample], unknown=None) -> "SampleSet":
        n = len(samples)
        X = np.array([s.features for s in samples], dtype=np.float64).reshape(n, len(schema))
        return cls(
            schema,
            [s.dimm for s in samples],
            np.array([s.t for s in samples], dtype=np.int64),
            X,
            np.array([s.label for s in samples], dtype=np.int8),
            dict(unknown or {}),
        )


def _ticks(first_ce: int, end: int, first_ue: int | None, step: int) -> range:
    stop = end if first_ue is None else min(end, first_ue - 1)
    if stop < first_ce + step:
        return range(0)
    return range(first_ce + step, stop + 1, step)


def build_samples(
    trace: ValidatedTrace,
    cfg: WindowConfig = WindowConfig(),
    mode: str = "batch",
    schema: FeatureSchema | None = None,
    thresholds: FaultThresholds | None = None,
) -> SampleSet:
    """One sample per DIMM per prediction tick.

    Ticks run every ``prediction_interval_ms`` starting one interval after the
    DIMM's first CE, up to the end of the trace and strictly before the DIMM's
    first UE (a failed DIMM is taken out of service).
    """
    schema = schema or FeatureSchema()
    thresholds = thresholds or FaultThresholds(analysis_window_ms=cfg.observation_ms)
    if max(schema.sub_windows_ms) > cfg.observation_ms:
        raise ValueError("feature sub-windows must fit in the observation window")
    if mode == "batch":
        return _build_batch(trace, cfg, schema, thresholds)
    if mode == "stream":
        sf = StreamFeaturizer(trace.meta, cfg, schema, thresholds)
        out = []
        for e in sorted(trace.events, key=lambda e: e.timestamp):
            out.extend(sf.push(e))
        out.extend(sf.flush())
        out.sort(key=lambda s: (s.dimm, s.t))
        return SampleSet.from_samples(schema, out, sf.unknown)
    raise ValueError(f"unknown mode {mode!r}")


def _build_batch(trace, cfg, schema, thresholds) -> SampleSet:
    span = trace.span
    if span is None:
        return SampleSet(schema)
    end = span[1]
    back = max(cfg.observation_ms, thresholds.analysis_window_ms)
    dimms, times, rows, labels = [], [], [], []
    unknown: Counter = Counter()
    for d, (ces, ues) in sorted(trace.by_dimm().items()):
        if not ces:
            continue
        ue_times = [u.timestamp for u in ues]
        ticks = _ticks(ces[0].timestamp, end, ue_times[0] if ue_times else None,
                       cfg.prediction_interval_ms)
        if not ticks:
            continue
        static, unk = encode_static(trace.meta[d], schema)
        unknown.update(unk)
        stamps = [e.timestamp for e in ces]
        for t in ticks:
            lo = bisect.bisect_right(stamps, t - back)
            hi = bisect.bisect_right(stamps, t)
            rows.append(dynamic_features(ces[lo:hi], t, schema, cfg, thresholds) + static)
            dimms.append(d)
            times.append(t)
            labels.append(label(t, ue_times, cfg))
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema))
    return SampleSet(schema, dimms, np.array(times, dtype=np.int64), X,
                     np.array(labels, dtype=np.int8), dict(unknown))


class StreamFeaturizer:
    """Incremental featurizer fed one event at a time in timestamp order.

    Feature vectors are frozen when the stream moves past their tick; labels
    are attached once the stream moves past the end of the tick's prediction
    window (or at ``flush``).
    """

    def __init__(self, meta, cfg: WindowConfig = WindowConfig(), schema: FeatureSchema | None = None,
                 thresholds: FaultThresholds | None = None):
        self.meta = dict(meta)
        self.cfg = cfg
        self.schema = schema or FeatureSchema()
        self.thresholds = thresholds or FaultThresholds(analysis_window_ms=cfg.observation_ms)
        self.unknown: Counter = Counter()
        self._back = max(cfg.observation_ms, self.thresholds.analysis_window_ms)
        self._buf: dict[DimmId, deque] = {}
        self._static: dict[DimmId, list[float]] = {}
        self._ues: dict[DimmId, list[int]] = {}
        self._stopped: set[DimmId] = set()
        self._ticks: list[tuple[int, DimmId]] = []
        self._pending: deque = deque()
        self._now: int | None = None

    def push(self, event: Event) -> list[Sample]:
        ts = event.timestamp
        if self._now is not None and ts < self._now:
            raise ValueError(f"stream out of order: {ts} after {self._now}")
        self._now = ts
        self._emit_ticks(lambda tick: tick < ts)
        done = self._resolve(lambda horizon: horizon < ts)
        d = event.dimm
        if isinstance(event, CeEvent):
            buf = self._buf.get(d)
            if buf is None:
                buf = self._buf[d] = deque()
                if d not in self._stopped:
                    heapq.heappush(self._ticks, (ts + self.cfg.prediction_interval_ms, d))
            buf.append(event)
        elif isinstance(event, UeEvent):
            self._ues.setdefault(d, []).append(ts)
            self._stopped.add(d)
        return done

    def flush(self, end: int | None = None) -> list[Sample]:
        end = self._now if end is None else end
        if end is not None:
            self._emit_ticks(lambda tick: tick <= end)
        return self._resolve(lambda horizon: True)

    def _emit_ticks(self, due) -> None:
        step = self.cfg.prediction_interval_ms
        while self._ticks and due(self._ticks[0][0]):
            t, d = heapq.heappop(self._ticks)
            if d in self._stopped:
                continue
            buf = self._buf[d]
            while buf and buf[0].timestamp <= t - self._back:
                buf.popleft()
            static = self._static.get(d)
            if static is None:
                static, unk = encode_static(self.meta[d], self.schema)
                self._static[d] = static
                self.unknown.update(unk)
            vec = dynamic_features(buf, t, self.schema, self.cfg, self.thresholds) + static
            horizon = t + self.cfg.lead_ms + self.cfg.prediction_ms
            self._pending.append((horizon, d, t, vec))
            heapq.heappush(self._ticks, (t + step, d))

    def _resolve(self, closed) -> list[Sample]:
        # ticks are emitted in time order, so horizons are non-decreasing
        out = []
        while self._pending and closed(self._pending[0][0]):
            _, d, t, vec = self._pending.popleft()
            y = label(t, self._ues.get(d, []), self.cfg)
            out.append(Sample(d, t, np.array(vec, dtype=np.float64), y))
        return out


def downsample_negatives(samples: SampleSet, ratio: float, seed: int = 0) -> SampleSet:
    """Keep every positive and at most ``ratio`` negatives per positive. Train-time only."""
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(samples.y == 1)
    neg = np.flatnonzero(samples.y == 0)
    k = min(len(neg), int(round(ratio * max(len(pos), 1))))
    keep = np.zeros(len(samples), dtype=bool)
    keep[pos] = True
    keep[np.sort(rng.choice(neg, size=k, replace=False))] = True
    return samples.subset(keep)


def write_matrix_csv(path: str | Path, samples: SampleSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dimm", "t", *samples.schema.names, "label"])
        for i in range(len(samples)):
            w.writerow([str(samples.dimms[i]), int(samples.times[i]),
                        *(repr(float(v)) for v in samples.X[i]), int(samples.y[i])])


def read_matrix_csv(path: str | Path, schema: FeatureSchema) -> SampleSet:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        expected = ["dimm", "t", *schema.names, "label"]
        if header != expected:
            raise ValueError(f"{path}: header does not match schema {schema.hash}")
        dimms, times, rows, labels = [], [], [], []
        for rec in r:
            dimms.append(DimmId.parse(rec[0]))
            times.append(int(rec[1]))
            rows.append([float(v) for v in rec[2:-1]])
            labels.append(int(rec[-1]))
    X = np.array(rows, dtype=np.float64).reshape(len(rows), len(schema))
    return SampleSet(schema, dimms, np.array(times, dtype=np.int64), X, np.array(labels, dtype=np.int8))
