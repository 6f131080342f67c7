"""Window-matched confusion accounting, precision/recall/F1 and VIRR.

VIRR (VM interruption reduction rate) compares VM interruptions with and
without the predictor: ``V = v_a (TP + FN)`` interruptions happen without
prediction, while with it cold migrations cost ``v_a y_c (TP + FP)`` and
misses cost ``v_a FN``. ``(V - V') / V`` simplifies to
``(1 - y_c / precision) * recall``.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .features import label
from .trace import DimmId, UeEvent, WindowConfig


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    dimm: DimmId
    t: int
    score: float
    positive: bool


@dataclass
class Outcomes:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    per_dimm: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.tp, self.fp, self.fn, self.tn))

    def merge(self, other: "Outcomes") -> "Outcomes":
        return Outcomes(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                        self.tn + other.tn, {**self.per_dimm, **other.per_dimm})


def _ue_times(ue_events) -> dict[DimmId, list[int]]:
    if isinstance(ue_events, Mapping):
        return {d: sorted(ts) for d, ts in ue_events.items()}
    out: dict[DimmId, list[int]] = {}
    for u in ue_events:
        out.setdefault(u.dimm, []).append(u.timestamp)
    return {d: sorted(ts) for d, ts in out.items()}


def match_outcomes(
    predictions: Iterable[PredictionRecord],
    ue_events: Iterable[UeEvent] | Mapping[DimmId, list[int]],
    population: Iterable[DimmId],
    cfg: WindowConfig = WindowConfig(),
    tick_level: bool = False,
) -> Outcomes:
    """DIMM-level confusion counts.

    A DIMM with a UE is a TP if some positive prediction at ``t`` has a UE in
    ``[t + lead, t + lead + prediction]``, otherwise a FN (out-of-window
    alarms do not rescue it). A DIMM without UE is a FP if it was ever
    flagged, otherwise a TN. With ``tick_level=True`` every prediction
    record is scored against its own label instead.
    """
    pop = set(population)
    ues = {d: ts for d, ts in _ue_times(ue_events).items() if d in pop}
    alarms: dict[DimmId, list[int]] = {}
    records = []
    for p in predictions:
        if p.dimm not in pop:
            raise EvaluationError(f"prediction for {p.dimm} outside the evaluated population")
        records.append(p)
        if p.positive:
            alarms.setdefault(p.dimm, []).append(p.t)

    if tick_level:
        out = Outcomes()
        for p in records:
            y = label(p.t, ues.get(p.dimm, []), cfg)
            if p.positive:
                out.tp += y
                out.fp += 1 - y
            else:
                out.fn += y
                out.tn += 1 - y
        return out

    out = Outcomes()
    span = cfg.lead_ms + cfg.prediction_ms
    for d in sorted(pop):
        ts = sorted(alarms.get(d, []))
        u_times = ues.get(d)
        if u_times:
            hit = False
            for u in u_times:
                # need an alarm t with u - lead - prediction <= t <= u - lead
                i = bisect.bisect_left(ts, u - span)
                if i < len(ts) and ts[i] <= u - cfg.lead_ms:
                    hit = True
                    break
            kind = "tp" if hit else "fn"
        else:
            kind = "fp" if ts else "tn"
        setattr(out, kind, getattr(out, kind) + 1)
        out.per_dimm[d] = kind
    return out


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def metrics(tp: int, fp: int, fn: int) -> tuple[float | None, float | None, float | None]:
    """Precision, recall, F1; any 0/0 comes back as None."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    if precision is None or recall is None:
        f1 = None
    else:
        f1 = _ratio(2 * precision * recall, precision + recall)
    return precision, recall, f1


def f1_score(precision: float, recall: float) -> float | None:
    return _ratio(2 * precision * recall, precision + recall)


def virr(precision: float | None, recall: float | None, y_c: float = 0.1) -> float | None:
    """``(1 - y_c / precision) * recall``; negative once precision drops below ``y_c``."""
    if precision is None or recall is None or precision == 0:
        return None
    return (1.0 - y_c / precision) * recall


@dataclass(frozen=True)
class VirrBreakdown:
    v: float
    v1: float
    v2: float
    v_prime: float
    virr: float | None


def virr_from_counts(tp: int, fp: int, fn: int, v_a: float = 10.0, y_c: float = 0.1) -> VirrBreakdown:
    """Interruption volumes without (``v``) and with (``v1 + v2``) prediction."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    if v_a <= 0:
        raise ValueError("v_a must be positive")
    v = v_a * (tp + fn)
    v1 = v_a * y_c * (tp + fp)
    v2 = v_a * fn
    vp = v1 + v2
    return VirrBreakdown(v, v1, v2, vp, (v - vp) / v if v else None)


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float | None
    recall: float | None
    f1: float | None
    virr: float | None
    y_c: float
    v_a: float
    interruptions_without: float
    interruptions_with: float
    window: dict
    per_platform: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(
    outcomes: Outcomes,
    cfg: WindowConfig,
    y_c: float = 0.1,
    v_a: float = 10.0,
    platform_of: Mapping[DimmId, str] | None = None,
) -> EvalReport:
    tp, fp, fn, tn = outcomes
    p, r, f1 = metrics(tp, fp, fn)
    vb = virr_from_counts(tp, fp, fn, v_a, y_c)
    per_platform = {}
    if platform_of:
        groups: dict[str, Outcomes] = {}
        for d, kind in outcomes.per_dimm.items():
            g = groups.setdefault(platform_of.get(d, "unknown"), Outcomes())
            setattr(g, kind, getattr(g, kind) + 1)
        for name, g in sorted(groups.items()):
            gp, gr, gf = metrics(g.tp, g.fp, g.fn)
            per_platform[name] = {"tp": g.tp, "fp": g.fp, "fn": g.fn, "tn": g.tn,
                                  "precision": gp, "recall": gr, "f1": gf, "virr": virr(gp, gr, y_c)}
    return EvalReport(tp, fp, fn, tn, p, r, f1, virr(p, r, y_c), y_c, v_a, vb.v, vb.v_prime,
                      asdict(cfg), per_platform)


def write_outcomes_csv(path: str | Path, outcomes: Outcomes) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dimm", "outcome"])
        for d, kind in sorted(outcomes.per_dimm.items()):
            w.writerow([str(d), kind])
