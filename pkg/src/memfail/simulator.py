"""Seeded fault-injection generator for desk-scale CE/UE traces.

Each DIMM draws its role from a private random stream derived from
``(seed, DimmId)``: healthy (sparse background CEs), faulty with one injected
fault mode and device scope, or a sudden-UE victim. A faulty DIMM fails with
a hazard set by its mode and scope; a DIMM destined to fail carries the
platform's risky DQ/beat signature in every CE bitmap, which is the planted
rule that links features to labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .faults import FaultThresholds, classify_faults
from .trace import (
    DAY,
    DEVICES_PER_RANK,
    DQ_WIDTHS,
    MINUTE,
    CeEvent,
    CellAddress,
    DimmId,
    DimmMeta,
    ErrorBitmap,
    UeEvent,
    ValidatedTrace,
    time_order_key,
    write_meta,
    write_trace_jsonl,
)

EPOCH_MS = 1_672_531_200_000  # 2023-01-01T00:00:00Z
MODES = ("cell", "row", "column", "bank")
SCOPES = ("single_device", "multi_device")
# smallest per-mode evidence every injected fault is guaranteed to emit
INJECTED_MIN_INTENSITY = {"cell_min_ces": 2, "row_min_distinct_columns": 2, "column_min_distinct_rows": 2}
DIMMS_PER_SERVER = (2, 4, 2)  # sockets, channels, slots
ROWS, COLUMNS = 1 << 16, 1 << 10


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class PlatformProfile:
    name: str
    predictable_ue_fraction: float
    fault_fraction: float = 0.25
    fault_mode_mix: dict = field(default_factory=lambda: {"cell": 0.45, "row": 0.25, "column": 0.2, "bank": 0.1})
    device_scope_mix: dict = field(default_factory=lambda: {"single_device": 0.7, "multi_device": 0.3})
    mode_hazard: dict = field(default_factory=lambda: {"cell": 0.03, "row": 0.35, "column": 0.2, "bank": 0.5})
    scope_hazard: dict = field(default_factory=lambda: {"single_device": 1.0, "multi_device": 1.0})
    # (weight, dq_count, beat_count, beat_interval) of the bitmap a doomed DIMM emits
    risky_patterns: tuple = ((1.0, 2, 2, 4),)
    ce_rate: float = 4.0
    background_ce_rate: float = 0.005
    ue_delay_days: tuple = (2.0, 20.0)
    platform: str = "custom"
    manufacturers: dict = field(default_factory=lambda: {"A": 0.4, "B": 0.3, "C": 0.2, "D": 0.1})
    chip_processes: dict = field(default_factory=lambda: {"1x": 0.3, "1y": 0.5, "1z": 0.2})
    frequencies: tuple = (2666, 2933)
    x8_fraction: float = 0.0

    def validate(self) -> "PlatformProfile":
        probs = {
            "predictable_ue_fraction": self.predictable_ue_fraction,
            "fault_fraction": self.fault_fraction,
            "x8_fraction": self.x8_fraction,
            **{f"mode_hazard.{k}": v for k, v in self.mode_hazard.items()},
        }
        for name, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ProfileError(f"{self.name}: {name}={p} outside [0, 1]")
        for name in ("fault_mode_mix", "device_scope_mix", "manufacturers", "chip_processes"):
            mix = getattr(self, name)
            if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
                raise ProfileError(f"{self.name}: {name} must be a distribution, got {mix}")
        if set(self.fault_mode_mix) != set(MODES) or set(self.mode_hazard) != set(MODES):
            raise ProfileError(f"{self.name}: fault modes must be exactly {MODES}")
        if set(self.device_scope_mix) != set(SCOPES) or set(self.scope_hazard) != set(SCOPES):
            raise ProfileError(f"{self.name}: scopes must be exactly {SCOPES}")
        if not self.risky_patterns or abs(sum(p[0] for p in self.risky_patterns) - 1.0) > 1e-9:
            raise ProfileError(f"{self.name}: risky pattern weights must sum to 1")
        for _, dq, beats, interval in self.risky_patterns:
            if not (2 <= dq <= 4 and 1 <= beats <= 8 and 0 <= interval <= 7):
                raise ProfileError(f"{self.name}: bad risky pattern {(dq, beats, interval)}")
            if beats >= 2 and not (1 <= interval and beats - 2 <= interval - 1):
                raise ProfileError(f"{self.name}: {beats} beats cannot span interval {interval}")
            if beats == 1 and interval != 0:
                raise ProfileError(f"{self.name}: single beat needs interval 0")
        if self.ce_rate < 0 or self.background_ce_rate < 0:
            raise ProfileError(f"{self.name}: CE rates must be non-negative")
        lo, hi = self.ue_delay_days
        if not 0 < lo <= hi:
            raise ProfileError(f"{self.name}: bad ue_delay_days {self.ue_delay_days}")
        return self

    def hazard(self, mode: str, scope: str) -> float:
        return min(1.0, self.mode_hazard[mode] * self.scope_hazard[scope])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["risky_patterns"] = [list(p) for p in self.risky_patterns]
        d["ue_delay_days"] = list(self.ue_delay_days)
        d["frequencies"] = list(self.frequencies)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "PlatformProfile | None" = None) -> "PlatformProfile":
        d = dict(d)
        for key in ("risky_patterns",):
            if key in d:
                d[key] = tuple(tuple(p) for p in d[key])
        for key in ("ue_delay_days", "frequencies"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ProfileError(f"unknown profile fields {sorted(unknown)}")
        prof = replace(base, **d) if base is not None else cls(**d)
        return prof.validate()


def builtin_profiles() -> dict[str, PlatformProfile]:
    """Purley, Whitley and K920 profiles.

    Predictable-UE fractions follow the production mix per platform. Purley
    UEs come mainly from single-device faults, Whitley and K920 from
    multi-device ones; row and bank faults are riskier than cell faults
    everywhere.
    """
    purley = PlatformProfile(
        name="purley",
        predictable_ue_fraction=0.73,
        scope_hazard={"single_device": 1.0, "multi_device": 0.3},
        risky_patterns=((0.6, 2, 2, 4), (0.4, 3, 3, 2)),
        platform="purley",
        frequencies=(2666, 2933),
    )
    whitley = PlatformProfile(
        name="whitley",
        predictable_ue_fraction=0.42,
        scope_hazard={"single_device": 0.35, "multi_device": 1.0},
        risky_patterns=((0.6, 4, 5, 4), (0.4, 2, 3, 2)),
        platform="whitley",
        frequencies=(3200,),
    )
    k920 = PlatformProfile(
        name="k920",
        predictable_ue_fraction=0.82,
        scope_hazard={"single_device": 0.2, "multi_device": 1.0},
        risky_patterns=((0.5, 2, 4, 3), (0.5, 3, 2, 1)),
        platform="k920",
        frequencies=(2933,),
        x8_fraction=0.05,
    )
    return {p.name: p.validate() for p in (purley, whitley, k920)}


def get_profile(name: str, overrides: dict | None = None) -> PlatformProfile:
    profiles = builtin_profiles()
    if name not in profiles:
        raise ProfileError(f"unknown profile {name!r}; choose from {sorted(profiles)}")
    prof = profiles[name]
    return PlatformProfile.from_dict(overrides, base=prof) if overrides else prof


@dataclass
class DimmTruth:
    faulty: bool = False
    mode: str | None = None
    scope: str | None = None
    destined: bool = False
    sudden: bool = False
    risk_pattern: tuple | None = None
    ue_times: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["risk_pattern"] = list(self.risk_pattern) if self.risk_pattern else None
        return d


@dataclass
class GroundTruth:
    profile: str
    seed: int
    dimms: dict[DimmId, DimmTruth] = field(default_factory=dict)

    def faulty(self) -> dict[DimmId, DimmTruth]:
        return {d: t for d, t in self.dimms.items() if t.faulty}

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "dimms": {str(d): t.to_dict() for d, t in sorted(self.dimms.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        dimms = {}
        for key, rec in doc["dimms"].items():
            rec = dict(rec)
            if rec.get("risk_pattern") is not None:
                rec["risk_pattern"] = tuple(rec["risk_pattern"])
            dimms[DimmId.parse(key)] = DimmTruth(**rec)
        return cls(doc["profile"], doc["seed"], dimms)


def dimm_ids(n: int) -> list[DimmId]:
    sockets, channels, slots = DIMMS_PER_SERVER
    per_server = sockets * channels * slots
    out = []
    for i in range(n):
        server, k = divmod(i, per_server)
        socket, k = divmod(k, channels * slots)
        channel, slot = divmod(k, slots)
        out.append(DimmId(f"srv{server:05d}", socket, channel, slot))
    return out


def dimm_rng(seed: int, dimm: DimmId, stream: str = "") -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{dimm}:{stream}".encode()).digest()
    return np.random.default_rng(np.random.SeedSequence(int.from_bytes(digest[:16], "little")))


def _pick(rng: np.random.Generator, mix: dict) -> str:
    keys = list(mix)
    return keys[int(rng.choice(len(keys), p=np.array([mix[k] for k in keys], dtype=float)))]


def risky_bitmap(rng: np.random.Generator, dq_count: int, beat_count: int,
                 beat_interval: int, dq_width: int = 4) -> ErrorBitmap:
    """A bitmap with exactly the requested DQ count, beat count and beat span."""
    dqs = sorted(rng.choice(dq_width, size=dq_count, replace=False).tolist())
    start = int(rng.integers(0, 8 - beat_interval))
    inner = list(range(start + 1, start + beat_interval))
    beats = [start]
    if beat_count >= 2:
        beats.append(start + beat_interval)
        beats += rng.choice(inner, size=beat_count - 2, replace=False).tolist() if beat_count > 2 else []
    beats.sort()
    n = max(dq_count, beat_count)
    return ErrorBitmap.from_bits(((beats[i % beat_count], dqs[i % dq_count]) for i in range(n)), dq_width)


def _meta(rng: np.random.Generator, dimm: DimmId, prof: PlatformProfile) -> DimmMeta:
    width = "x8" if rng.random() < prof.x8_fraction else "x4"
    return DimmMeta(
        dimm,
        manufacturer=_pick(rng, prof.manufacturers),
        data_width=width,
        frequency=int(prof.frequencies[int(rng.integers(len(prof.frequencies)))]),
        chip_process=_pick(rng, prof.chip_processes),
        platform=prof.platform,
    )


def _random_cell(rng: np.random.Generator, devices: int) -> CellAddress:
    return CellAddress(
        int(rng.integers(2)), int(rng.integers(devices)), int(rng.integers(4)),
        int(rng.integers(4)), int(rng.integers(ROWS)), int(rng.integers(COLUMNS)),
    )


def _fault_cells(rng: np.random.Generator, mode: str, scope: str, n: int, devices: int) -> list[CellAddress]:
    """``n`` CE locations of one injected fault; the leading ones form the skeleton."""
    base = _random_cell(rng, devices)
    devs = [base.device]
    if scope == "multi_device":
        others = [d for d in range(devices) if d != base.device]
        k = int(rng.integers(1, 3))
        devs += sorted(rng.choice(others, size=k, replace=False).tolist())

    if mode == "cell":
        locs = [(base.row, base.column)] * max(n, 2)
        skeleton = 2
    elif mode == "row":
        cols = rng.permutation(COLUMNS)
        locs = [(base.row, int(cols[i % COLUMNS])) for i in range(max(n, 2))]
        skeleton = 2
    elif mode == "column":
        rows = rng.choice(ROWS, size=min(max(n, 2), 4096), replace=False)
        locs = [(int(rows[i % len(rows)]), base.column) for i in range(max(n, 2))]
        skeleton = 2
    else:
        rows = rng.choice(ROWS, size=16, replace=False).tolist()
        cols = rng.choice(COLUMNS, size=16, replace=False).tolist()
        locs = [(rows[0], cols[0]), (rows[0], cols[1]), (rows[1], cols[0])]
        while len(locs) < n:
            locs.append((rows[int(rng.integers(16))], cols[int(rng.integers(16))]))
        skeleton = 3

    out = []
    for i, (row, col) in enumerate(locs):
        if i < skeleton or len(devs) == 1:
            dev = devs[0]
        elif i == skeleton:
            dev = devs[1]
        else:
            dev = devs[int(rng.integers(len(devs)))]
        out.append(CellAddress(base.rank, dev, base.bank_group, base.bank, row, col))
    if scope == "multi_device" and len(out) == skeleton:
        r, c = locs[0]
        out.append(CellAddress(base.rank, devs[1], base.bank_group, base.bank, r, c))
    return out


def _minutes(rng: np.random.Generator, lo: int, hi: int, n: int) -> list[int]:
    """``n`` sorted minute offsets in [lo, hi)."""
    if n <= 0:
        return []
    hi = max(hi, lo + 1)
    return sorted(int(x) for x in rng.integers(lo, hi, size=n))


def generate_trace(
    profile: PlatformProfile | str,
    n_dimms: int,
    duration_days: float,
    seed: int = 0,
) -> tuple[list, list[DimmMeta], GroundTruth]:
    """Return ``(events, meta, truth)``; events are in timestamp order."""
    prof = get_profile(profile) if isinstance(profile, str) else profile.validate()
    if n_dimms < 1:
        raise ProfileError("n_dimms must be >= 1")
    if duration_days < 0:
        raise ProfileError("duration must be non-negative")
    total_min = int(duration_days * DAY // MINUTE)
    dimms = dimm_ids(n_dimms)
    truth = GroundTruth(prof.name, seed)
    meta = []
    rngs = {}
    for d in dimms:
        rng = dimm_rng(seed, d)
        rngs[d] = rng
        m = _meta(rng, d, prof)
        meta.append(m)
        t = DimmTruth()
        if rng.random() < prof.fault_fraction:
            t.faulty = True
            t.mode = _pick(rng, prof.fault_mode_mix)
            t.scope = _pick(rng, prof.device_scope_mix)
            t.destined = bool(rng.random() < prof.hazard(t.mode, t.scope))
            if t.destined:
                weights = np.array([p[0] for p in prof.risky_patterns], dtype=float)
                t.risk_pattern = tuple(prof.risky_patterns[int(rng.choice(len(weights), p=weights))][1:])
        truth.dimms[d] = t

    if total_min <= 0:
        return [], meta, truth

    # sudden UEs: enough CE-free victims to realise the predictable fraction
    n_pred = sum(t.destined for t in truth.dimms.values())
    p = prof.predictable_ue_fraction
    n_sudden = int(round(n_pred * (1 - p) / p)) if p > 0 else 0
    healthy = [d for d in dimms if not truth.dimms[d].faulty]
    pick = np.random.default_rng(np.random.SeedSequence([seed, 0x5D])).permutation(len(healthy))
    for i in sorted(pick[:n_sudden].tolist()):
        truth.dimms[healthy[i]].sudden = True

    events = []
    metas = {m.dimm: m for m in meta}
    for d in dimms:
        events.extend(_dimm_events(rngs[d], d, metas[d], truth.dimms[d], prof, total_min))
    events.sort(key=time_order_key)
    return events, meta, truth


def _dimm_events(rng, d: DimmId, m: DimmMeta, t: DimmTruth, prof: PlatformProfile, total_min: int) -> list:
    devices = DEVICES_PER_RANK[m.data_width]
    width = DQ_WIDTHS[m.data_width]
    out = []
    if t.sudden:
        when = EPOCH_MS + int(rng.integers(total_min)) * MINUTE
        t.ue_times = [when]
        return [UeEvent(when, d, _random_cell(rng, devices), sudden=True)]

    if not t.faulty:
        n = int(rng.poisson(prof.background_ce_rate * total_min * MINUTE / DAY))
        for minute in _minutes(rng, 0, total_min, n):
            cell = _random_cell(rng, devices)
            bit = ErrorBitmap.from_bits([(int(rng.integers(8)), int(rng.integers(width)))], width)
            out.append(CeEvent(EPOCH_MS + minute * MINUTE, d, cell, bit))
        return out

    if t.destined:
        lo, hi = (x * DAY // MINUTE for x in prof.ue_delay_days)
        delay = int(rng.integers(lo, hi + 1))
        delay = max(1, min(delay, (total_min * 4) // 5))
        onset = int(rng.integers(0, max(1, total_min - delay)))
        ue_min = min(onset + delay, total_min - 1)
        end_min = ue_min
        dq, beats, interval = t.risk_pattern
        bitmap = risky_bitmap(rng, min(dq, width), beats, interval, width)
    else:
        onset = int(rng.integers(0, total_min))
        end_min = total_min
        bitmap = ErrorBitmap.from_bits([(int(rng.integers(8)), int(rng.integers(width)))], width)

    active_days = (end_min - onset) * MINUTE / DAY
    n = int(rng.poisson(prof.ce_rate * active_days))
    cells = _fault_cells(rng, t.mode, t.scope, n, devices)
    # skeleton CEs stay early so the fault is visible from onset
    minutes = [onset] + _minutes(rng, onset, end_min, len(cells) - 1)
    for cell, minute in zip(cells, minutes):
        count = int(rng.geometric(0.8))
        out.append(CeEvent(EPOCH_MS + minute * MINUTE, d, cell, bitmap, count))
    if t.destined:
        when = EPOCH_MS + max(ue_min, minutes[-1] + 1) * MINUTE
        t.ue_times = [when]
        out.append(UeEvent(when, d, cells[-1], sudden=False))
    return out


def save_simulation(out_dir: str | Path, events, meta, truth: GroundTruth) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.jsonl", "meta": out / "meta.json", "truth": out / "truth.json"}
    write_trace_jsonl(paths["trace"], events)
    write_meta(paths["meta"], meta)
    paths["truth"].write_text(json.dumps(truth.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return paths


def load_truth(path: str | Path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def verify_ground_truth(
    trace: ValidatedTrace,
    truth: GroundTruth,
    thresholds: FaultThresholds = FaultThresholds(),
    required: float = 0.95,
) -> dict:
    """Check that ``classify_faults`` finds each injected fault mode and scope."""
    injected = truth.faulty()
    by_dimm = trace.by_dimm()
    mismatches = []
    hits = 0
    for d, t in sorted(injected.items()):
        ces = by_dimm.get(d, ([], []))[0]
        diag = classify_faults(ces, thresholds, dimm=d)
        found = diag.modes()
        if t.mode in found and t.scope in found:
            hits += 1
        else:
            mismatches.append({"dimm": str(d), "injected": [t.mode, t.scope], "found": sorted(found)})
    recovery = hits / len(injected) if injected else None
    too_strict = {k: getattr(thresholds, k) for k, v in INJECTED_MIN_INTENSITY.items()
                  if getattr(thresholds, k) > v}
    return {
        "injected": len(injected),
        "recovered": hits,
        "recovery": recovery,
        "passed": recovery is None or recovery >= required,
        "threshold_mismatch": bool(too_strict),
        "thresholds_above_injected": too_strict,
        "mismatches": mismatches,
    }
