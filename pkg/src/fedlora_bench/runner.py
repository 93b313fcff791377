"""Deterministic scenario execution: feasibility check, round loop, trace output."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import rng as rngmod
from .config import ScenarioConfig
from .edge_sim import (
    ClientRoundCost,
    CostLedger,
    check_feasibility,
    client_costs,
    dropped_client_costs,
    memory_footprint,
    select_clients,
)
from .fed_methods import MethodKind, RunContext, StrategyKind, run_method
from .lora_model import (
    BaseModel,
    SyntheticTask,
    TrainConfig,
    evaluate,
    generate_task,
    init_adapters,
    pretrained_base,
    train_centroid,
)
from .perturbations import apply_dropout, bandwidth_multiplier, build_mix
from .trace import TraceHeader, TraceWriter, parse_trace


@dataclass(frozen=True)
class Setup:
    task: SyntheticTask
    base: BaseModel
    pool: tuple  # ClientRecord per client id
    profiles: dict


def train_config(cfg: ScenarioConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(t.learning_rate, t.weight_decay, t.beta1, t.beta2, t.epsilon,
                       t.batch_size, t.local_epochs)


def build_setup(cfg: ScenarioConfig) -> Setup:
    """Task, pretrained model and client pool; data depends on seed and client id only."""
    task = generate_task(
        cfg.seed, cfg.clients.pool_size, cfg.task.samples_per_client, cfg.task.input_dim,
        cfg.task.num_classes, cfg.task.non_iid_concentration, cfg.model.hidden_dims,
        cfg.task.test_size, cfg.task.teacher_gain,
    )
    base = pretrained_base(task.teacher, cfg.seed, cfg.model.pretrained_noise)
    pool = build_mix(cfg.client_mix(), cfg.clients.pool_size)
    return Setup(task, base, pool, cfg.profiles())


def client_layers(kind: StrategyKind, base: BaseModel):
    if kind.kind is MethodKind.SPLIT:
        return list(range(kind.split_layer_index))
    return None


def device_footprints(cfg: ScenarioConfig, kind: StrategyKind, base: BaseModel) -> dict:
    """Peak client memory (MiB) per device class for this method."""
    layers = client_layers(kind, base)
    return {
        name: memory_footprint(base.layer_dims, kind.client_rank(name), cfg.training.batch_size,
                               layers, cfg.system.runtime_overhead_mb)
        for name in cfg.profiles()
        if kind.kind is not MethodKind.HETERO or name in kind.rank_map
    }


def method_feasible(cfg: ScenarioConfig, kind: StrategyKind, setup: Setup) -> bool:
    fp = device_footprints(cfg, kind, setup.base)
    per_client = {c.client_id: fp[c.device] for c in setup.pool}
    devices = {c.client_id: setup.profiles[c.device] for c in setup.pool}
    return check_feasibility(per_client, devices)


def execute(cfg: ScenarioConfig, out, setup: Optional[Setup] = None) -> bool:
    """Run one scenario, streaming the trace to the text handle ``out``.

    Returns the feasibility flag; infeasible methods get a header plus marker only.
    """
    setup = setup or build_setup(cfg)
    kind = cfg.strategy()
    base, task, pool, profiles = setup.base, setup.task, setup.pool, setup.profiles
    footprints = device_footprints(cfg, kind, base)
    feasible = method_feasible(cfg, kind, setup)
    pre = evaluate(base, init_adapters(base, kind.r_max, rngmod.stream(cfg.seed, "init"),
                                       cfg.model.init_std, cfg.model.alpha), task.test)
    header = TraceHeader(cfg.config_hash(), cfg.to_dict(), kind.kind.display, kind.kind.value,
                         feasible, footprints, pre.loss, pre.accuracy)
    writer = TraceWriter(out, header)
    if not feasible:
        over = sorted(n for n, mb in footprints.items()
                      if mb > profiles[n].memory_capacity_mb and any(c.device == n for c in pool))
        writer.marker("infeasible", reason="out_of_memory", devices=over)
        return False

    spec = cfg.perturbation_spec()
    ratio = spec.effective_dropout
    n_pool = cfg.clients.pool_size
    ctx = RunContext(
        base=base,
        shards=task.shards,
        devices=[c.device for c in pool],
        rounds=cfg.scenario.rounds,
        seed=cfg.seed,
        train=train_config(cfg),
        select=lambda r: select_clients(n_pool, cfg.scenario.clients_per_round,
                                        rngmod.stream(cfg.seed, "select", r)),
        dropout=lambda r, sel: apply_dropout(sel, ratio, rngmod.stream(cfg.seed, "dropout", r)),
        init_std=cfg.model.init_std,
        alpha=cfg.model.alpha,
    )
    ledger = CostLedger()
    best, stale = -math.inf, 0
    patience = cfg.scenario.early_stop_patience
    for outcome in run_method(kind, ctx):
        r = outcome.round_index
        mult = bandwidth_multiplier(ledger.wall_clock_hours) if spec.fluctuating else 1.0
        nominal = {}
        for w in outcome.work:
            prof = profiles[w.device]
            nominal[w.client_id] = client_costs(prof, w.down_bytes, w.up_bytes + w.final_upload_bytes,
                                                w.compute_units, mult, footprints[w.device])
        deadline = cfg.system.dropout_timeout_factor * max(c.total_seconds for c in nominal.values())
        clients = []
        for w in outcome.work:
            cost = nominal[w.client_id]
            dropped = outcome.dropped[w.client_id]
            up = w.up_bytes if dropped else w.up_bytes + w.final_upload_bytes
            if dropped:
                cost = dropped_client_costs(profiles[w.device], cost, deadline)
            clients.append(ClientRoundCost(w.client_id, w.device, cost.train_seconds, cost.comm_seconds,
                                           w.down_bytes, up, cost.energy_kj, cost.peak_memory_mb, dropped))
        evaluation = None
        if r % cfg.scenario.eval_every == 0 or r == cfg.scenario.rounds:
            evaluation = evaluate(base, outcome.global_adapters, task.test)
        train_loss = math.fsum(w.train_loss for w in outcome.work) / len(outcome.work)
        rec = ledger.commit(r, outcome.selected, clients, mult, cfg.system.server_aggregation_seconds,
                            outcome.aggregated, train_loss, evaluation)
        writer.round(rec)
        if patience and evaluation is not None:
            if evaluation.accuracy > best:
                best, stale = evaluation.accuracy, 0
            else:
                stale += 1
                if stale >= patience:
                    writer.marker("early_stop", round_index=r)
                    break
    return True


def run_scenario(cfg: ScenarioConfig, trace_path, setup: Optional[Setup] = None) -> Path:
    """Write the trace for ``cfg`` to ``trace_path``; an I/O failure leaves an aborted marker."""
    path = Path(trace_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        try:
            execute(cfg, fh, setup)
        except OSError as e:
            try:
                fh.write('{"reason":%s,"type":"aborted"}\n' % _quote(str(e)))
            finally:
                raise
    return path


def _quote(s: str) -> str:
    import json
    return json.dumps(s)


def run_in_memory(cfg: ScenarioConfig, setup: Optional[Setup] = None) -> tuple:
    """Run and return ``(trace_text, Trace)`` without touching disk."""
    buf = io.StringIO()
    execute(cfg, buf, setup)
    text = buf.getvalue()
    return text, parse_trace(text.splitlines())


def centroid_reference(cfg: ScenarioConfig, setup: Optional[Setup] = None, rounds: Optional[int] = None):
    """(pretrained accuracy, best centroid accuracy), both as fractions."""
    setup = setup or build_setup(cfg)
    kind = cfg.strategy()
    pre = evaluate(setup.base, init_adapters(setup.base, kind.r_max, rngmod.stream(cfg.seed, "init"),
                                             cfg.model.init_std, cfg.model.alpha), setup.task.test)
    hist = train_centroid(setup.base, setup.task, rounds or cfg.scenario.rounds, train_config(cfg),
                          cfg.seed, kind.r_max, cfg.model.init_std, cfg.model.alpha)
    return pre.accuracy, max(e.accuracy for _, e in hist)
