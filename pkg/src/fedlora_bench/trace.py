"""Line-delimited JSON traces: one header, one record per round, optional end marker."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import IO, Optional

from .edge_sim import ClientRoundCost, RoundRecord
from .protocols import MethodTrace, Snapshot

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """Trace written with an unsupported or inconsistent schema."""


def dumps(obj) -> str:
    # json emits repr() floats, which round-trip exactly
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class TraceHeader:
    config_hash: str
    config: dict
    method: str
    kind: str
    feasible: bool
    footprints_mb: dict  # device class -> per-client peak memory
    pretrained_loss: float
    pretrained_accuracy: float
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return {"type": "header", **dataclasses.asdict(self)}

    @classmethod
    def from_json(cls, d: dict) -> "TraceHeader":
        d = {k: v for k, v in d.items() if k != "type"}
        return cls(**d)


def record_to_json(rec: RoundRecord) -> dict:
    d = dataclasses.asdict(rec)
    d["selected"] = list(rec.selected)
    d["clients"] = [dataclasses.asdict(c) for c in rec.clients]
    return {"type": "round", **d}


def record_from_json(d: dict) -> RoundRecord:
    d = {k: v for k, v in d.items() if k != "type"}
    d["selected"] = tuple(d["selected"])
    d["clients"] = tuple(ClientRoundCost(**c) for c in d["clients"])
    return RoundRecord(**d)


@dataclass(frozen=True)
class Trace:
    header: TraceHeader
    rounds: tuple
    marker: Optional[dict] = None  # {"type": "infeasible" | "aborted", ...}

    @property
    def complete(self) -> bool:
        return self.marker is None or self.marker.get("type") == "early_stop"

    def method_trace(self) -> MethodTrace:
        snaps = tuple(
            Snapshot(
                round_index=r.round_index,
                wall_clock_hours=r.cum_wall_clock_hours,
                comm_mb=r.cum_comm_mb,
                energy_kj=r.cum_energy_kj,
                memory_mb=r.mean_peak_memory_mb,
                max_memory_mb=r.max_peak_memory_mb,
                accuracy=r.eval_accuracy,
                loss=r.eval_loss,
                train_loss=r.train_loss,
            )
            for r in self.rounds
        )
        return MethodTrace(self.header.method, self.header.feasible, snaps)


class TraceWriter:
    """Append-only writer; rounds must arrive in strictly increasing order."""

    def __init__(self, fh: IO[str], header: TraceHeader):
        self._fh = fh
        self._last = 0
        self._write(header.to_json())

    def _write(self, obj):
        self._fh.write(dumps(obj) + "\n")
        self._fh.flush()

    def round(self, rec: RoundRecord):
        if rec.round_index <= self._last:
            raise ValueError(f"round {rec.round_index} written after round {self._last}")
        self._last = rec.round_index
        self._write(record_to_json(rec))

    def marker(self, kind: str, **info):
        self._write({"type": kind, **info})


def parse_trace(lines) -> Trace:
    header, rounds, marker = None, [], None
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"line {n}: {e}") from None
        kind = obj.get("type")
        if n == 1 or header is None:
            if kind != "header":
                raise SchemaError("first record must be the header")
            if obj.get("schema_version") != SCHEMA_VERSION:
                raise SchemaError(f"schema_version {obj.get('schema_version')} != {SCHEMA_VERSION}")
            header = TraceHeader.from_json(obj)
        elif kind == "round":
            if marker is not None:
                raise SchemaError(f"line {n}: round after end marker")
            rec = record_from_json(obj)
            if rounds and rec.round_index <= rounds[-1].round_index:
                raise SchemaError(f"line {n}: rounds out of order")
            rounds.append(rec)
        elif kind in ("infeasible", "aborted", "early_stop"):
            marker = obj
        else:
            raise SchemaError(f"line {n}: unknown record type {kind!r}")
    if header is None:
        raise SchemaError("empty trace")
    return Trace(header, tuple(rounds), marker)


def load_trace(path) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh)
