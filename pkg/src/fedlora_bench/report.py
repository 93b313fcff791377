"""Render protocol reports as CSV or aligned text, and (de)serialize them."""

from __future__ import annotations

import csv
import io
import json
from typing import Sequence

from .protocols import AxisScore, Cell, ProtocolReport, ReportRow

DASH = "-"

HEADINGS = {
    "loss": "Loss",
    "accuracy": "Acc(%)",
    "wall_clock_hours": "Time(h)",
    "comm_mb": "Comm(MB)",
    "energy_kj": "Energy(kJ)",
    "memory_mb": "Mem(MB)",
}


def _scale(metric: str) -> float:
    return 100.0 if metric == "accuracy" else 1.0


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _fmt_delta(x: float) -> str:
    return f"{x:+.2f}"


def format_cell(metric: str, cell: Cell, with_delta: bool) -> tuple:
    """(value text, rank text) for one cell; unranked cells render as dashes."""
    if cell.value is None or cell.rank is None:
        return DASH, DASH
    text = _fmt(cell.value * _scale(metric))
    if with_delta and cell.delta is not None:
        text += f" ({_fmt_delta(cell.delta * _scale(metric))})"
    return text, str(cell.rank)


def table_rows(report: ProtocolReport) -> list:
    with_delta = report.protocol == "C"
    header = ["Method"]
    for m in report.metrics:
        header += [HEADINGS.get(m, m), "Rank"]
    rows = [header]
    for row in report.rows:
        line = [row.method]
        for m in report.metrics:
            line += list(format_cell(m, row.cells[m], with_delta))
        rows.append(line)
    return rows


def title(report: ProtocolReport) -> str:
    parts = [f"Protocol {report.protocol}"]
    if report.model:
        parts.append(report.model)
    if report.label:
        parts.append(report.label)
    return " | ".join(parts)


def to_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def to_text(rows: Sequence[Sequence[str]], heading: str = "") -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [heading] if heading else []
    for k, r in enumerate(rows):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render(report: ProtocolReport, fmt: str = "text") -> str:
    rows = table_rows(report)
    return to_csv(rows) if fmt == "csv" else to_text(rows, title(report))


# ---------------------------------------------------------------------------
# overall ranking


def overall_rows(scores: Sequence[AxisScore]) -> list:
    rows = [["Method", "Protocol", "Model", "AvgRank", "Radar"]]
    for s in scores:
        rows.append([s.method, s.protocol, s.model or DASH, _fmt(s.average_rank), _fmt(s.radar)])
    return rows


def render_overall(scores: Sequence[AxisScore], fmt: str = "text") -> str:
    rows = overall_rows(scores)
    return to_csv(rows) if fmt == "csv" else to_text(rows, "Overall ranking")


# ---------------------------------------------------------------------------
# json round-trip


def report_to_json(report: ProtocolReport) -> dict:
    return {
        "protocol": report.protocol,
        "label": report.label,
        "model": report.model,
        "metrics": list(report.metrics),
        "rows": [
            {
                "method": r.method,
                "feasible": r.feasible,
                "cells": {m: {"value": c.value, "rank": c.rank, "delta": c.delta} for m, c in r.cells.items()},
            }
            for r in report.rows
        ],
    }


def report_from_json(d: dict) -> ProtocolReport:
    rows = tuple(
        ReportRow(r["method"], r["feasible"], {m: Cell(c["value"], c["rank"], c["delta"]) for m, c in r["cells"].items()})
        for r in d["rows"]
    )
    return ProtocolReport(d["protocol"], tuple(d["metrics"]), rows, d.get("label", ""), d.get("model", ""))


def dump_reports(reports: Sequence[ProtocolReport]) -> str:
    return json.dumps([report_to_json(r) for r in reports], sort_keys=True, indent=1) + "\n"


def load_reports(text: str) -> list:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [report_from_json(d) for d in data]
