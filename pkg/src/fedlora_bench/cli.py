"""Command-line entry point: run scenarios, evaluate traces, render reports."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import protocols as P
from .config import load_config
from .edge_sim import ConfigError
from .fed_methods import MethodKind
from .report import dump_reports, load_reports, render, render_overall
from .runner import centroid_reference, run_scenario
from .trace import SchemaError, load_trace

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4


def _emit(text_by_fmt: dict, fmt: str, out: Optional[str]):
    sys.stdout.write(text_by_fmt[fmt])
    if out:
        base = Path(out)
        base.parent.mkdir(parents=True, exist_ok=True)
        for ext, key in ((".csv", "csv"), (".txt", "text"), (".json", "json")):
            if key in text_by_fmt:
                base.with_suffix(ext).write_text(text_by_fmt[key], encoding="utf-8")


def _emit_reports(reports, args):
    texts = {
        "csv": "\n".join(render(r, "csv") for r in reports),
        "text": "\n".join(render(r, "text") for r in reports),
        "json": dump_reports(reports),
    }
    _emit(texts, args.format, args.out)


def _method_traces(paths):
    return [load_trace(p).method_trace() for p in paths]


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    kinds = args.method or [cfg.method.kind]
    out_dir = Path(args.out_dir)
    any_feasible = False
    for kind in kinds:
        run_cfg = cfg.replace(method={"kind": MethodKind(kind).value})
        path = Path(args.output) if args.output and len(kinds) == 1 else out_dir / f"{run_cfg.scenario.name}_{kind}.jsonl"
        run_scenario(run_cfg, path)
        trace = load_trace(path)
        any_feasible |= trace.header.feasible
        status = "ok" if trace.header.feasible else "infeasible"
        print(f"{trace.header.method}: {status}, {len(trace.rounds)} rounds -> {path}")
    return EXIT_OK if any_feasible else EXIT_INFEASIBLE


def _budget(args) -> P.Budget:
    caps = {}
    if args.config:
        b = load_config(args.config).budget
        caps = {k: getattr(b, k) for k in ("comm_mb", "wall_clock_hours", "energy_kj", "memory_mb")}
    for k in ("comm_mb", "wall_clock_hours", "energy_kj", "memory_mb"):
        v = getattr(args, k)
        if v is not None:
            caps[k] = v
    return P.Budget(**caps)


def cmd_eval_a(args) -> int:
    report = P.eval_protocol_a(_method_traces(args.traces), _budget(args), args.model)
    _emit_reports([report], args)
    return EXIT_OK


def cmd_eval_b(args) -> int:
    percents = args.targets
    if percents is None and args.config:
        t = load_config(args.config).targets
        if t.percents is not None:
            percents = list(t.percents)
        elif args.pretrained is not None and args.centroid is not None:
            percents = P.derive_targets(args.pretrained, args.centroid, t.fractions)
    if percents is None and args.pretrained is not None and args.centroid is not None:
        percents = P.derive_targets(args.pretrained, args.centroid)
    if percents is None:
        raise ConfigError("targets: pass --targets, --pretrained/--centroid, or a config with targets.percents")
    reports = P.eval_protocol_b(_method_traces(args.traces), P.targets_from_percentages(percents), args.model)
    _emit_reports(reports, args)
    return EXIT_OK


def cmd_eval_c(args) -> int:
    report = P.eval_protocol_c(_method_traces(args.nominal), _method_traces(args.perturbed),
                               relative=args.relative, label=args.label, model=args.model)
    _emit_reports([report], args)
    return EXIT_OK


def cmd_derive_targets(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        pre, cen = centroid_reference(cfg)
        pre, cen = pre * 100, cen * 100
        fractions = args.fractions or list(cfg.targets.fractions)
    elif args.pretrained is not None and args.centroid is not None:
        pre, cen = args.pretrained, args.centroid
        fractions = args.fractions or [0.5, 0.7, 0.9]
    else:
        raise ConfigError("derive-targets: pass --config or both --pretrained and --centroid")
    targets = P.derive_targets(pre, cen, fractions)
    rows = [["pretrained", "centroid"] + [f"target@{f:g}" for f in fractions],
            [f"{pre:.2f}", f"{cen:.2f}"] + [str(t) for t in targets]]
    from .report import to_csv, to_text
    _emit({"csv": to_csv(rows), "text": to_text(rows)}, args.format, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for p in args.reports:
        reports.extend(load_reports(Path(p).read_text(encoding="utf-8")))
    scores = P.overall_ranking(reports)
    _emit({"csv": render_overall(scores, "csv"), "text": render_overall(scores, "text")}, args.format, args.out)
    return EXIT_OK


def curve_rows(trace) -> list:
    rows = [["wall_clock_hours", "train_loss"]]
    for r in trace.rounds:
        if r.eval_accuracy is not None:
            rows.append([repr(r.cum_wall_clock_hours), repr(r.train_loss)])
    return rows


def cmd_curves(args) -> int:
    from .report import to_csv
    text = to_csv(curve_rows(load_trace(args.trace)))
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedlora-bench", description="Federated LoRA edge benchmark harness")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--format", choices=("csv", "text"), default="text", help="stdout table format")
        if out:
            p.add_argument("--out", help="write PREFIX.csv, PREFIX.txt (and PREFIX.json for reports)")

    p = sub.add_parser("run", help="execute a scenario and write its trace")
    p.add_argument("config")
    p.add_argument("--method", action="append", choices=[k.value for k in MethodKind],
                   help="override method.kind; repeat to run several")
    p.add_argument("-o", "--output", help="trace path (single method only)")
    p.add_argument("--out-dir", default="traces")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval-a", help="quality under budget")
    p.add_argument("traces", nargs="+")
    p.add_argument("--config", help="take budget caps from this scenario file")
    for k in ("comm_mb", "wall_clock_hours", "energy_kj", "memory_mb"):
        p.add_argument(f"--{k.replace('_', '-')}", dest=k, type=float)
    p.add_argument("--model", default="")
    common(p)
    p.set_defaults(func=cmd_eval_a)

    p = sub.add_parser("eval-b", help="cost to reach target accuracies")
    p.add_argument("traces", nargs="+")
    p.add_argument("--targets", type=int, nargs="+", help="whole-percent targets")
    p.add_argument("--pretrained", type=float, help="pretrained accuracy, percent")
    p.add_argument("--centroid", type=float, help="centroid accuracy, percent")
    p.add_argument("--config")
    p.add_argument("--model", default="")
    common(p)
    p.set_defaults(func=cmd_eval_b)

    p = sub.add_parser("eval-c", help="robustness against a perturbation")
    p.add_argument("--nominal", nargs="+", required=True)
    p.add_argument("--perturbed", nargs="+", required=True)
    p.add_argument("--relative", action="store_true", help="percentage change instead of absolute")
    p.add_argument("--label", default="")
    p.add_argument("--model", default="")
    common(p)
    p.set_defaults(func=cmd_eval_c)

    p = sub.add_parser("derive-targets", help="targets from pretrained and centroid accuracy")
    p.add_argument("--config", help="run the centroid reference for this scenario")
    p.add_argument("--pretrained", type=float)
    p.add_argument("--centroid", type=float)
    p.add_argument("--fractions", type=float, nargs="+")
    common(p)
    p.set_defaults(func=cmd_derive_targets)

    p = sub.add_parser("report", help="overall ranking from saved report files")
    p.add_argument("reports", nargs="+", help="JSON files written by eval-* --out")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("curves", help="training loss against wall-clock time")
    p.add_argument("trace")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_curves)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, P.PairingError, P.NoDataError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
