import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from fedlora_bench import cli
from fedlora_bench.config import ConfigError, from_dict, load_config
from fedlora_bench.edge_sim import ClientRoundCost, RoundRecord
from fedlora_bench.protocols import Cell, MethodTrace, ProtocolReport, ReportRow, Snapshot, eval_protocol_b, \
    eval_protocol_c, overall_ranking, targets_from_percentages
from fedlora_bench.report import load_reports, dump_reports, render, render_overall, table_rows
from fedlora_bench.runner import run_in_memory
from fedlora_bench.trace import SchemaError, TraceHeader, TraceWriter, parse_trace, record_from_json, record_to_json


# ---------------------------------------------------------------- config


def test_defaults_are_valid():
    cfg = from_dict({}, env={})
    assert cfg.scenario.rounds == 50 and cfg.scenario.clients_per_round == 10
    assert cfg.client_mix() == {"Jetson": 20, "IQOO": 20, "P50": 20, "Mate20": 20, "Nova9": 20}
    assert cfg.strategy().mu == 0.01


@pytest.mark.parametrize("data,path", [
    ({"method": {"rnak": 8}}, "method.rnak"),
    ({"bogus": {}}, "bogus"),
    ({"scenario": {"clients_per_round": 101}}, "scenario.clients_per_round"),
    ({"scenario": {"rounds": "many"}}, "scenario.rounds"),
    ({"method": {"kind": "fedsgd"}}, "method.kind"),
    ({"method": {"rank": 64}}, "method.rank"),
    ({"devices": {"P50": {"speed": 1.0}}}, "devices.P50.speed"),
    ({"clients": {"mix": "50J+40I"}}, "clients.mix"),
    ({"perturbation": {"kind": "dropout", "dropout_ratio": 1.0}}, "perturbation.dropout_ratio"),
])
def test_validation_errors_name_the_field(data, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        from_dict(data, env={})


def test_seed_env_override():
    assert from_dict({}, env={"FEDLORA_SEED": "42"}).seed == 42
    with pytest.raises(ConfigError):
        from_dict({}, env={"FEDLORA_SEED": "x"})


def test_load_toml_and_hash(tmp_path):
    p = tmp_path / "s.toml"
    p.write_text('[scenario]\nseed = 3\n[clients]\nmix = "70J+20I+10P"\n[devices.P50]\nmemory_capacity_mb = 100.0\n')
    cfg = load_config(p, env={})
    assert cfg.seed == 3 and cfg.client_mix()["Jetson"] == 70
    assert cfg.profiles()["P50"].memory_capacity_mb == 100.0
    assert cfg.config_hash() == load_config(p, env={}).config_hash()
    assert cfg.config_hash() != from_dict({}, env={}).config_hash()


def test_mix_perturbation_overrides_pool():
    cfg = from_dict({"perturbation": {"kind": "mix", "mix": "100J"}}, env={})
    assert cfg.client_mix()["Jetson"] == 100


# ---------------------------------------------------------------- trace


costs = st.builds(
    ClientRoundCost,
    st.integers(0, 99), st.sampled_from(["Jetson", "P50"]), st.floats(0, 1e4), st.floats(0, 1e4),
    st.integers(0, 2**40), st.integers(0, 2**40), st.floats(0, 1e3), st.floats(0, 1e4), st.booleans(),
)
opt = st.none() | st.floats(0, 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(costs, min_size=1, max_size=5), st.integers(1, 1000), st.floats(0, 1e6), opt, opt)
def test_record_round_trip(clients, r, t, acc, loss):
    rec = RoundRecord(r, tuple(c.client_id for c in clients), tuple(clients), 0.5, t, 7, 1.5, True, 0.25,
                      t, 2**41 + 3, 1e-7, 3.5, 4.5, loss, acc)
    line = json.dumps(record_to_json(rec))
    assert record_from_json(json.loads(line)) == rec


def header():
    return TraceHeader("h", {}, "FedAvg+LoRA", "fedavg_lora", True, {"Jetson": 1.0}, 2.0, 0.4)


def test_trace_writer_enforces_order():
    import io
    buf = io.StringIO()
    w = TraceWriter(buf, header())
    rec = RoundRecord(2, (), (), 1.0, 1.0, 0, 0.0, True, 0.0, 1.0, 0, 0.0, 0.0, 0.0)
    w.round(rec)
    with pytest.raises(ValueError):
        w.round(rec)


def test_trace_schema_errors():
    with pytest.raises(SchemaError):
        parse_trace(['{"type": "round"}'])
    bad = dict(header().to_json(), schema_version=99)
    with pytest.raises(SchemaError):
        parse_trace([json.dumps(bad)])


# ---------------------------------------------------------------- runner


def test_default_pool_twenty_rounds():
    cfg = from_dict({"scenario": {"rounds": 20}}, env={})
    text, tr = run_in_memory(cfg)
    assert len(tr.rounds) == 20
    assert all(len(r.selected) == 10 and len(r.clients) == 10 for r in tr.rounds)
    assert [r.round_index for r in tr.rounds] == list(range(1, 21))
    assert tr.header.config_hash == cfg.config_hash()
    assert text == run_in_memory(cfg)[0]


def test_eval_cadence_and_final_round():
    _, tr = run_in_memory(small_config(scenario={"rounds": 7, "eval_every": 3}))
    assert [r.round_index for r in tr.rounds if r.has_eval] == [3, 6, 7]


def test_infeasible_trace_has_marker_only(tmp_path):
    cfg = small_config(devices={n: {"memory_capacity_mb": 0.5} for n in ("Jetson", "IQOO", "P50", "Mate20", "Nova9")})
    _, tr = run_in_memory(cfg)
    assert not tr.header.feasible and tr.rounds == () and tr.marker["type"] == "infeasible"


def test_early_stop_flag():
    _, tr = run_in_memory(small_config(scenario={"rounds": 40, "early_stop_patience": 1},
                                       training={"learning_rate": 1e-6}))
    assert tr.marker["type"] == "early_stop" and len(tr.rounds) < 40


def test_dropout_zero_matches_nominal():
    a, _ = run_in_memory(small_config())
    b, _ = run_in_memory(small_config(perturbation={"kind": "dropout", "dropout_ratio": 0.0}))
    strip = lambda t: t.splitlines()[1:]
    assert strip(a) == strip(b)


def test_mix_keeps_data_for_uniform_rank_methods():
    nominal = run_in_memory(small_config())[1]
    mixed = run_in_memory(small_config(clients={"mix": {"Jetson": 20}}))[1]
    assert [r.eval_accuracy for r in nominal.rounds] == [r.eval_accuracy for r in mixed.rounds]
    assert nominal.rounds[-1].cum_wall_clock_seconds != mixed.rounds[-1].cum_wall_clock_seconds


# ---------------------------------------------------------------- reports


def cost_trace(name, t, comm, e, mem, acc=0.8):
    return MethodTrace(name, True, (Snapshot(1, t, comm, e, mem, mem, acc, 0.5),))


def test_protocol_b_fixture_block_renders_published_cells(published):
    block = next(b for b in published["blocks"] if b["id"] == "b/qwen2.5-0.5b/headline/boolq/t71")
    traces = [cost_trace(m, *block["values"][m]) for m in block["methods"]]
    (rep,) = eval_protocol_b(traces, targets_from_percentages([71]))
    rows = table_rows(rep)
    for line, m in zip(rows[1:], block["methods"]):
        expected = [m]
        for v, r in zip(block["values"][m], block["ranks"][m]):
            expected += [f"{v:.2f}", str(r)]
        assert line == expected


def test_zero_budget_renders_dashes():
    from fedlora_bench.protocols import Budget, eval_protocol_a
    rep = eval_protocol_a([cost_trace("X", 1, 1, 1, 1)], Budget(0, 0, 0, 0))
    assert table_rows(rep)[1] == ["X", "-", "-", "-", "-"]
    assert render(rep, "csv").splitlines()[1] == "X,-,-,-,-"


def test_protocol_c_identical_table():
    t = [cost_trace("X", 1.0, 2.0, 3.0, 4.0)]
    rows = table_rows(eval_protocol_c(t, t))
    assert rows[1] == ["X", "80.00 (+0.00)", "1", "1.00 (+0.00)", "1", "2.00 (+0.00)", "1", "3.00 (+0.00)", "1",
                       "4.00 (+0.00)", "1"]


def test_report_json_round_trip():
    t = [cost_trace("X", 1.0, 2.0, 3.0, 4.0), cost_trace("Y", 2.0, 2.0, 3.0, 4.0)]
    reps = eval_protocol_b(t, targets_from_percentages([50, 70]), model="m")
    assert load_reports(dump_reports(reps)) == reps


def one_row_report(ranks, model="m"):
    cells = {f"k{i}": Cell(1.0, r) for i, r in enumerate(ranks)}
    return ProtocolReport("A", tuple(cells), (ReportRow("X", True, cells),), model=model)


def test_overall_examples():
    (s,) = overall_ranking([one_row_report([1, 1])])
    assert s.radar == 3.0
    (s,) = overall_ranking([one_row_report([1]), one_row_report([3])])
    assert s.average_rank == 2.0 and s.radar == 2.0
    inf = ProtocolReport("A", ("k",), (ReportRow("X", False, {"k": Cell(None)}),), model="big")
    assert {x.model for x in overall_ranking([one_row_report([1]), inf])} == {"m"}
    assert "Radar" in render_overall(overall_ranking([one_row_report([2])]))


# ---------------------------------------------------------------- cli


def write_cfg(tmp_path, text="[scenario]\nrounds = 3\nclients_per_round = 2\n[clients]\npool_size = 10\n[task]\nsamples_per_client = 16\ntest_size = 50\n"):
    p = tmp_path / "s.toml"
    p.write_text(text)
    return p


def test_cli_run_and_curves(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    trace = tmp_path / "t.jsonl"
    assert cli.main(["run", str(cfg), "-o", str(trace)]) == cli.EXIT_OK
    capsys.readouterr()
    assert cli.main(["curves", str(trace)]) == cli.EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "wall_clock_hours,train_loss" and len(lines) == 4
    hours = [float(l.split(",")[0]) for l in lines[1:]]
    assert hours == sorted(hours) and len(set(hours)) == 3
    tr = parse_trace(trace.read_text().splitlines())
    assert [float(l.split(",")[1]) for l in lines[1:]] == [r.train_loss for r in tr.rounds]


def test_cli_curves_without_evals(tmp_path, capsys):
    p = tmp_path / "t.jsonl"
    p.write_text(json.dumps(header().to_json()) + "\n")
    assert cli.main(["curves", str(p)]) == 0
    assert capsys.readouterr().out == "wall_clock_hours,train_loss\n"


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == cli.EXIT_IO
    bad = write_cfg(tmp_path, "[scenario]\nclients_per_round = 500\n")
    assert cli.main(["run", str(bad)]) == cli.EXIT_VALIDATION
    assert "scenario.clients_per_round" in capsys.readouterr().err
    tiny = write_cfg(tmp_path, "[clients]\npool_size = 10\n[scenario]\nclients_per_round = 2\n"
                               "[devices.Jetson]\nmemory_capacity_mb = 0.1\n")
    assert cli.main(["run", str(tiny), "--out-dir", str(tmp_path)]) == cli.EXIT_INFEASIBLE


def test_cli_derive_targets(capsys):
    assert cli.main(["derive-targets", "--pretrained", "55.99", "--centroid", "68.07", "--format", "csv"]) == 0
    assert capsys.readouterr().out.splitlines()[1].endswith(",62,64,66")


def test_cli_eval_pipeline(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "traces"
    assert cli.main(["run", str(cfg), "--method", "fedavg_lora", "--method", "split_lora", "--out-dir", str(out)]) == 0
    traces = sorted(str(p) for p in out.glob("*.jsonl"))
    assert cli.main(["eval-a", *traces, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["eval-b", *traces, "--targets", "10", "99", "--out", str(tmp_path / "b")]) == 0
    assert cli.main(["eval-c", "--nominal", *traces, "--perturbed", *traces, "--out", str(tmp_path / "c")]) == 0
    assert cli.main(["report", str(tmp_path / "a.json"), str(tmp_path / "b.json"), str(tmp_path / "c.json"),
                     "--format", "csv", "--out", str(tmp_path / "overall")]) == 0
    for name in ("a", "b", "c"):
        assert (tmp_path / f"{name}.csv").exists() and (tmp_path / f"{name}.txt").exists()
    assert (tmp_path / "overall.csv").read_text().startswith("Method,Protocol,Model,AvgRank,Radar")
    assert cli.main(["eval-b", *traces]) == cli.EXIT_VALIDATION
