"""Benchmark evaluators: quality under budget, cost to target, robustness."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

HIGHER = "higher"
LOWER = "lower"

DIRECTIONS = {
    "accuracy": HIGHER,
    "loss": LOWER,
    "wall_clock_hours": LOWER,
    "comm_mb": LOWER,
    "energy_kj": LOWER,
    "memory_mb": LOWER,
}


class NoDataError(ValueError):
    """A trace holds no usable snapshots."""


class PairingError(ValueError):
    """Nominal and perturbed runs cover different methods."""


def dense_rank(values: Sequence[float], direction: str = HIGHER) -> list:
    """Rank = 1 + number of strictly better distinct values; ties share a rank."""
    if direction not in (HIGHER, LOWER):
        raise ValueError(f"direction must be {HIGHER!r} or {LOWER!r}")
    vals = [float(v) for v in values]
    if any(not math.isfinite(v) for v in vals):
        raise ValueError("values must be finite")
    distinct = sorted(set(vals), reverse=(direction == HIGHER))
    pos = {v: i + 1 for i, v in enumerate(distinct)}
    return [pos[v] for v in vals]


def derive_targets(pretrained_pct: float, centroid_pct: float,
                   fractions: Sequence[float] = (0.5, 0.7, 0.9)) -> list:
    """Whole-percent targets floor(p + f * (c - p)), computed in exact decimal arithmetic."""
    p, c = Fraction(repr(float(pretrained_pct))), Fraction(repr(float(centroid_pct)))
    if p > c:
        raise ValueError("pretrained accuracy exceeds centroid accuracy")
    return [math.floor(p + Fraction(repr(float(f))) * (c - p)) for f in fractions]


# ---------------------------------------------------------------------------
# trace view


@dataclass(frozen=True)
class Snapshot:
    """Cumulative costs and (optional) evaluation at the end of one round."""

    round_index: int
    wall_clock_hours: float
    comm_mb: float
    energy_kj: float
    memory_mb: float  # mean of participating clients' high-water marks
    max_memory_mb: float  # largest single-client high-water mark
    accuracy: Optional[float] = None
    loss: Optional[float] = None
    train_loss: Optional[float] = None


@dataclass(frozen=True)
class MethodTrace:
    method: str
    feasible: bool
    snapshots: tuple = ()

    @property
    def evaluated(self) -> list:
        return [s for s in self.snapshots if s.accuracy is not None]


@dataclass(frozen=True)
class Budget:
    comm_mb: Optional[float] = None
    wall_clock_hours: Optional[float] = None
    energy_kj: Optional[float] = None
    memory_mb: Optional[float] = None

    def __post_init__(self):
        for name in ("comm_mb", "wall_clock_hours", "energy_kj", "memory_mb"):
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ValueError(f"budget {name} must be a non-negative number")

    def admits(self, s: Snapshot) -> bool:
        checks = (
            (self.comm_mb, s.comm_mb),
            (self.wall_clock_hours, s.wall_clock_hours),
            (self.energy_kj, s.energy_kj),
            (self.memory_mb, s.max_memory_mb),
        )
        return all(cap is None or used <= cap for cap, used in checks)


@dataclass(frozen=True)
class TargetSpec:
    target: float  # accuracy fraction
    pretrained_acc: Optional[float] = None
    centroid_acc: Optional[float] = None
    label: Optional[str] = None

    def __post_init__(self):
        p, c = self.pretrained_acc, self.centroid_acc
        if p is not None and c is not None:
            if p > c:
                raise ValueError("pretrained_acc must not exceed centroid_acc")
            if not p <= self.target <= c:
                raise ValueError(f"target {self.target} outside [{p}, {c}]")

    @property
    def name(self) -> str:
        return self.label or f"{self.target * 100:g}%"


def targets_from_percentages(percents: Sequence[int], pretrained_acc=None, centroid_acc=None) -> list:
    return [TargetSpec(p / 100.0, pretrained_acc, centroid_acc, f"{p}%") for p in percents]


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class Cell:
    value: Optional[float]
    rank: Optional[int] = None
    delta: Optional[float] = None

    @property
    def ranked(self) -> bool:
        return self.rank is not None


@dataclass(frozen=True)
class ReportRow:
    method: str
    feasible: bool
    cells: dict  # metric -> Cell


@dataclass(frozen=True)
class ProtocolReport:
    protocol: str
    metrics: tuple
    rows: tuple
    label: str = ""
    model: str = ""

    def row(self, method: str) -> ReportRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def ranks(self, metric: str) -> dict:
        return {r.method: r.cells[metric].rank for r in self.rows}


def _rank_cells(values: Mapping[str, Optional[float]], direction: str, key=None) -> dict:
    """Dense-rank the methods that have a value; others stay unranked."""
    present = [m for m, v in values.items() if v is not None]
    scores = [values[m] if key is None else key(values[m]) for m in present]
    ranks = dict(zip(present, dense_rank(scores, direction))) if present else {}
    return {m: ranks.get(m) for m in values}


def eval_protocol_a(traces: Sequence[MethodTrace], budget: Budget = Budget(), model: str = "") -> ProtocolReport:
    """Best accuracy and best loss within the budget, ranked independently."""
    best_acc, best_loss = {}, {}
    for t in traces:
        if t.feasible and not t.evaluated:
            raise NoDataError(f"trace for {t.method} has no evaluation snapshots")
        ok = [s for s in t.evaluated if s.round_index > 0 and budget.admits(s)] if t.feasible else []
        best_acc[t.method] = max((s.accuracy for s in ok), default=None)
        best_loss[t.method] = min((s.loss for s in ok), default=None)
    acc_rank = _rank_cells(best_acc, HIGHER)
    loss_rank = _rank_cells(best_loss, LOWER)
    rows = tuple(
        ReportRow(t.method, t.feasible, {
            "loss": Cell(best_loss[t.method], loss_rank[t.method]),
            "accuracy": Cell(best_acc[t.method], acc_rank[t.method]),
        })
        for t in traces
    )
    return ProtocolReport("A", ("loss", "accuracy"), rows, "", model)


COST_METRICS = ("wall_clock_hours", "comm_mb", "energy_kj", "memory_mb")


def first_reaching(trace: MethodTrace, target: float) -> Optional[Snapshot]:
    for s in trace.evaluated:
        if s.round_index > 0 and s.accuracy >= target - 1e-12:
            return s
    return None


def eval_protocol_b(traces: Sequence[MethodTrace], targets: Sequence[TargetSpec], model: str = "") -> list:
    """One report per target: cumulative cost at the first snapshot reaching it."""
    reports = []
    for spec in targets:
        values = {m: {} for m in COST_METRICS}
        for t in traces:
            hit = first_reaching(t, spec.target) if t.feasible else None
            for m in COST_METRICS:
                values[m][t.method] = None if hit is None else getattr(hit, m)
        ranks = {m: _rank_cells(values[m], LOWER) for m in COST_METRICS}
        rows = tuple(
            ReportRow(t.method, t.feasible,
                      {m: Cell(values[m][t.method], ranks[m][t.method]) for m in COST_METRICS})
            for t in traces
        )
        reports.append(ProtocolReport("B", COST_METRICS, rows, spec.name, model))
    return reports


ROBUSTNESS_METRICS = ("accuracy",) + COST_METRICS


def final_metrics(trace: MethodTrace) -> dict:
    if not trace.snapshots:
        raise NoDataError(f"trace for {trace.method} is empty")
    last = trace.snapshots[-1]
    evaluated = trace.evaluated
    return {
        "accuracy": evaluated[-1].accuracy if evaluated else None,
        "wall_clock_hours": last.wall_clock_hours,
        "comm_mb": last.comm_mb,
        "energy_kj": last.energy_kj,
        "memory_mb": last.memory_mb,
    }


def _percent_change(a: float, b: float) -> Optional[float]:
    if a == b:
        return 0.0
    if a == 0:
        return None  # undefined, left unranked
    return (b - a) / abs(a) * 100.0


def eval_protocol_c(nominal: Sequence[MethodTrace], perturbed: Sequence[MethodTrace],
                    relative: bool = False, label: str = "", model: str = "") -> ProtocolReport:
    """Perturbed value and change from nominal per metric, ranked by absolute change.

    With ``relative=True`` the change is a percentage of the nominal value.
    """
    nom = {t.method: t for t in nominal}
    per = {t.method: t for t in perturbed}
    if set(nom) != set(per):
        raise PairingError(f"unpaired methods: {sorted(set(nom) ^ set(per))}")
    order = [t.method for t in perturbed]
    deltas = {m: {} for m in ROBUSTNESS_METRICS}
    values = {m: {} for m in ROBUSTNESS_METRICS}
    feasible = {}
    for name in order:
        feasible[name] = nom[name].feasible and per[name].feasible
        fn = final_metrics(nom[name]) if feasible[name] else {}
        fp = final_metrics(per[name]) if feasible[name] else {}
        for m in ROBUSTNESS_METRICS:
            a, b = fn.get(m), fp.get(m)
            values[m][name] = b
            if a is None or b is None:
                deltas[m][name] = None
            elif relative:
                deltas[m][name] = _percent_change(a, b)
            else:
                deltas[m][name] = b - a
    ranks = {m: _rank_cells(deltas[m], LOWER, key=abs) for m in ROBUSTNESS_METRICS}
    rows = tuple(
        ReportRow(name, feasible[name], {
            m: Cell(values[m][name], ranks[m][name], deltas[m][name]) for m in ROBUSTNESS_METRICS
        })
        for name in order
    )
    return ProtocolReport("C", ROBUSTNESS_METRICS, rows, label, model)


# ---------------------------------------------------------------------------
# overall


@dataclass(frozen=True)
class AxisScore:
    method: str
    protocol: str
    model: str
    average_rank: float

    @property
    def radar(self) -> float:
        return radar_value(self.average_rank)


def radar_value(average_rank: float) -> float:
    return 4.0 - average_rank


def overall_ranking(reports: Sequence[ProtocolReport]) -> list:
    """Pool every rank a method earned on each (protocol, model) axis and average it."""
    pooled = defaultdict(list)
    for rep in reports:
        for row in rep.rows:
            if not row.feasible:
                continue
            for metric in rep.metrics:
                cell = row.cells[metric]
                if cell.rank is not None:
                    pooled[(row.method, rep.protocol, rep.model)].append(cell.rank)
    return [
        AxisScore(method, protocol, model, sum(r) / len(r))
        for (method, protocol, model), r in sorted(pooled.items())
    ]
