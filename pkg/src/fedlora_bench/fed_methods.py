"""Federated LoRA strategies: FedAvg, FedProx, heterogeneous-rank and split training."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .lora_model import (
    AdapterSet,
    BaseModel,
    LoraLayer,
    Prox,
    TaskShard,
    TrainConfig,
    apply_updates,
    backward_range,
    batch_schedule,
    forward_range,
    init_adapters,
    init_optimizer,
    pad_layer,
    train_local,
    truncate_layer,
)
from .numerics import softmax_cross_entropy

BYTES_PER_ELEMENT = 8


class StrategyMisuseError(ValueError):
    """Payloads are incompatible with the requested aggregation."""


class MethodKind(str, enum.Enum):
    FEDAVG = "fedavg_lora"
    FEDPROX = "fedprox_lora"
    HETERO = "hetero_lora"
    SPLIT = "split_lora"

    @property
    def display(self) -> str:
        return DISPLAY_NAMES[self]


DISPLAY_NAMES = {
    MethodKind.FEDAVG: "FedAvg+LoRA",
    MethodKind.FEDPROX: "FedProx+LoRA",
    MethodKind.HETERO: "HeteroLoRA",
    MethodKind.SPLIT: "SplitLoRA",
}

DEFAULT_RANK_MAP = {"Jetson": 8, "IQOO": 8, "P50": 4, "Mate20": 4, "Nova9": 4}


@dataclass(frozen=True)
class StrategyKind:
    kind: MethodKind
    rank: int = 8
    mu: float = 0.01
    rank_map: dict = field(default_factory=lambda: dict(DEFAULT_RANK_MAP))
    sync_period_rounds: int = 1
    split_layer_index: int = 1
    server_side_trainable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", MethodKind(self.kind))
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.sync_period_rounds < 1:
            raise ValueError("sync_period_rounds must be >= 1")
        if self.split_layer_index < 1:
            raise ValueError("split_layer_index must be >= 1")

    def client_rank(self, device: str) -> int:
        if self.kind is MethodKind.HETERO:
            return int(self.rank_map[device])
        return self.rank

    @property
    def r_max(self) -> int:
        if self.kind is MethodKind.HETERO:
            return max(int(r) for r in self.rank_map.values())
        return self.rank


def payload_bytes(num_elements: int) -> int:
    """Wire size of ``num_elements`` float64 values."""
    return int(num_elements) * BYTES_PER_ELEMENT


def adapter_bytes(adapters: AdapterSet, indices=None) -> int:
    return payload_bytes(adapters.num_elements(indices))


@dataclass(frozen=True)
class ExchangeRecord:
    client_id: int
    batch_index: int
    direction: str  # "up" (activation) or "down" (activation gradient)
    nbytes: int


@dataclass(frozen=True)
class ClientPayload:
    client_id: int
    sample_count: int
    adapters: Optional[AdapterSet] = None
    exchanges: tuple = ()

    @property
    def payload_bytes(self) -> int:
        n = 0 if self.adapters is None else adapter_bytes(self.adapters)
        return n + sum(e.nbytes for e in self.exchanges)


# ---------------------------------------------------------------------------
# aggregation


def _weights(payloads: Sequence[ClientPayload]) -> np.ndarray:
    counts = np.array([p.sample_count for p in payloads], dtype=np.float64)
    if np.any(counts <= 0):
        raise StrategyMisuseError("sample counts must be positive")
    return counts / counts.sum()


def _weighted_layer(layers: Sequence[LoraLayer], w: np.ndarray) -> LoraLayer:
    A = w[0] * layers[0].A
    B = w[0] * layers[0].B
    for wi, layer in zip(w[1:], layers[1:]):
        A = A + wi * layer.A
        B = B + wi * layer.B
    return LoraLayer(A, B, layers[0].alpha)


def aggregate_fedavg(payloads: Sequence[ClientPayload]) -> AdapterSet:
    """Sample-count-weighted mean of each A and B, taken in client-id order."""
    if not payloads:
        raise StrategyMisuseError("no payloads to aggregate")
    ordered = sorted(payloads, key=lambda p: p.client_id)
    sets = [p.adapters for p in ordered]
    ref = sets[0]
    for s in sets[1:]:
        if len(s) != len(ref):
            raise StrategyMisuseError("adapter sets cover different layer counts")
        for a, b in zip(s.layers, ref.layers):
            if (a is None) != (b is None):
                raise StrategyMisuseError("adapter sets cover different layers")
            if a is not None and (a.A.shape != b.A.shape or a.B.shape != b.B.shape):
                raise StrategyMisuseError(
                    f"rank/shape mismatch {a.A.shape} vs {b.A.shape}; use aggregate_hetero"
                )
    w = _weights(ordered)
    out = []
    for i, layer in enumerate(ref.layers):
        out.append(None if layer is None else _weighted_layer([s[i] for s in sets], w))
    return AdapterSet(tuple(out))


def pad_adapters(adapters: AdapterSet, r_max: int) -> AdapterSet:
    return AdapterSet(tuple(None if l is None else pad_layer(l, r_max) for l in adapters.layers))


def truncate_adapters(adapters: AdapterSet, rank: int) -> AdapterSet:
    out = []
    for l in adapters.layers:
        out.append(None if l is None else truncate_layer(l, min(rank, l.rank)))
    return AdapterSet(tuple(out))


def aggregate_hetero(payloads: Sequence[ClientPayload], r_max: int):
    """Zero-pad every client to ``r_max``, average, then truncate back per client.

    Returns ``(padded_aggregate, {client_id: truncated AdapterSet})``.
    """
    for p in payloads:
        for l in p.adapters.layers:
            if l is not None and l.rank > r_max:
                raise ValueError(f"client {p.client_id} rank {l.rank} exceeds r_max {r_max}")
    padded = [
        ClientPayload(p.client_id, p.sample_count, pad_adapters(p.adapters, r_max)) for p in payloads
    ]
    agg = aggregate_fedavg(padded)
    per_client = {}
    for p in payloads:
        ranks = [l.rank for l in p.adapters.layers if l is not None]
        per_client[p.client_id] = truncate_adapters(agg, max(ranks)) if ranks else agg
    return agg, per_client


# ---------------------------------------------------------------------------
# split learning


@dataclass
class SplitClient:
    client_id: int
    shard: TaskShard
    adapters: AdapterSet  # client-side layers populated, the rest None
    schedule: list


def _split_step(base, client: AdapterSet, server: AdapterSet, x, y, k: int):
    """One batch through the split: returns (loss, client_grads, server_grads, act_size, grad_size)."""
    L = base.num_layers
    act, c_caches = forward_range(base, client, x, 0, k)
    merged = _merge(client, server, k)
    logits, s_caches = forward_range(base, merged, act, k, L)
    loss, g = softmax_cross_entropy(logits, y)
    g_act, s_grads = backward_range(base, merged, s_caches, g, k, L)
    _, c_grads = backward_range(base, client, c_caches, g_act, 0, k)
    return loss, c_grads, s_grads, act.size, g_act.size


def split_round(
    base: BaseModel,
    clients: Sequence[SplitClient],
    server_adapters: AdapterSet,
    cfg: TrainConfig,
    split_layer_index: int = 1,
    server_side_trainable: bool = True,
    observer: Optional[Callable] = None,
):
    """Run each client's batches through a client/server split of the model.

    Clients are served sequentially in client-id order; the server keeps one
    optimizer state for the whole round. ``observer(client_id, batch, x, y,
    client_adapters, server_adapters, client_grads)`` is called before each
    update, with the parameters the gradients were taken at. Returns
    ``(client_adapters_by_id, server_adapters, exchange_log, losses_by_id)``.
    """
    k = split_layer_index
    L = base.num_layers
    if not 1 <= k < L:
        raise ValueError(f"split_layer_index {k} must lie in [1, {L - 1}]")
    client_idx = list(range(k))
    server_idx = list(range(k, L))
    server_states = init_optimizer(server_adapters, cfg, server_idx) if server_side_trainable else {}
    updated, log, losses = {}, [], {}
    for c in sorted(clients, key=lambda c: c.client_id):
        local = c.adapters
        states = init_optimizer(local, cfg, client_idx)
        batch_losses = []
        for b, idx in enumerate(c.schedule):
            x, y = c.shard.features[idx], c.shard.labels[idx]
            loss, c_grads, s_grads, n_act, n_grad = _split_step(base, local, server_adapters, x, y, k)
            log.append(ExchangeRecord(c.client_id, b, "up", payload_bytes(n_act)))
            log.append(ExchangeRecord(c.client_id, b, "down", payload_bytes(n_grad)))
            if observer is not None:
                observer(c.client_id, b, x, y, local, server_adapters, c_grads)
            if server_side_trainable and s_grads:
                server_adapters, server_states = apply_updates(server_adapters, s_grads, server_states)
            local, states = apply_updates(local, c_grads, states)
            batch_losses.append(loss)
        updated[c.client_id] = local
        losses[c.client_id] = float(np.mean(batch_losses)) if batch_losses else 0.0
    return updated, server_adapters, log, losses


def _merge(client: AdapterSet, server: AdapterSet, k: int) -> AdapterSet:
    return AdapterSet(tuple(client.layers[:k]) + tuple(server.layers[k:]))


def split_client_gradients(base, client_adapters, server_adapters, batch, k: int = 1):
    """Client-side LoRA gradients for one batch obtained through the split exchange."""
    x, y = batch
    return _split_step(base, client_adapters, server_adapters, x, y, k)[1]


# ---------------------------------------------------------------------------
# orchestration


@dataclass(frozen=True)
class ClientWork:
    """What one selected client did in a round, before cost accounting."""

    client_id: int
    device: str
    rank: int
    compute_units: float  # full-model batch steps equivalent
    down_bytes: int
    up_bytes: int  # streamed during training, delivered even if the client drops
    final_upload_bytes: int  # end-of-round upload, lost if the client drops
    sample_count: int
    train_loss: float


@dataclass(frozen=True)
class RoundOutcome:
    round_index: int
    selected: tuple
    work: tuple
    dropped: dict
    global_adapters: AdapterSet
    aggregated: bool


@dataclass
class RunContext:
    """Everything ``run_method`` needs from the surrounding simulation."""

    base: BaseModel
    shards: Sequence[TaskShard]
    devices: Sequence[str]  # device class per client id
    rounds: int
    seed: int
    train: TrainConfig
    select: Callable[[int], Sequence[int]]
    dropout: Callable[[int, Sequence[int]], dict]
    init_std: float = 0.02
    alpha: Optional[float] = None


def client_compute_fraction(base: BaseModel, layers: Sequence[int]) -> float:
    """Share of per-batch multiply-adds hosted on the given layers."""
    sizes = [a * b for a, b in base.layer_dims]
    return sum(sizes[i] for i in layers) / sum(sizes)


def run_method(kind: StrategyKind, ctx: RunContext) -> Iterator[RoundOutcome]:
    """Yield one RoundOutcome per round: select, distribute, train, collect, aggregate."""
    if kind.kind is MethodKind.SPLIT:
        yield from _run_split(kind, ctx)
    else:
        yield from _run_adapter_fl(kind, ctx)


def initial_adapters(kind: StrategyKind, ctx: RunContext) -> AdapterSet:
    return init_adapters(ctx.base, kind.r_max, rngmod.stream(ctx.seed, "init"), ctx.init_std, ctx.alpha)


def _schedule(ctx: RunContext, r: int, cid: int):
    shard = ctx.shards[cid]
    g = rngmod.stream(ctx.seed, "batches", r, cid)
    return batch_schedule(len(shard), ctx.train.batch_size, g, ctx.train.local_epochs)


def _run_adapter_fl(kind: StrategyKind, ctx: RunContext):
    hetero = kind.kind is MethodKind.HETERO
    prox_mu = kind.mu if kind.kind is MethodKind.FEDPROX else 0.0
    global_ = initial_adapters(kind, ctx)
    for r in range(1, ctx.rounds + 1):
        selected = tuple(sorted(int(c) for c in ctx.select(r)))
        payloads, work = [], []
        for cid in selected:
            rank = kind.client_rank(ctx.devices[cid])
            start = truncate_adapters(global_, rank) if hetero else global_
            prox = Prox(prox_mu, start) if prox_mu > 0 else None
            sched = _schedule(ctx, r, cid)
            local, loss, steps = train_local(ctx.base, start, ctx.shards[cid], sched, ctx.train, prox)
            nbytes = adapter_bytes(start)
            payloads.append(ClientPayload(cid, len(ctx.shards[cid]), local))
            work.append(ClientWork(cid, ctx.devices[cid], rank, float(steps), nbytes, 0, nbytes,
                                   len(ctx.shards[cid]), loss))
        dropped = {cid: bool(ctx.dropout(r, selected).get(cid, False)) for cid in selected}
        survivors = [p for p in payloads if not dropped[p.client_id]]
        if survivors:
            global_ = aggregate_hetero(survivors, kind.r_max)[0] if hetero else aggregate_fedavg(survivors)
        yield RoundOutcome(r, selected, tuple(work), dropped, global_, bool(survivors))


def _run_split(kind: StrategyKind, ctx: RunContext):
    k = kind.split_layer_index
    L = ctx.base.num_layers
    if not 1 <= k < L:
        raise ValueError(f"split_layer_index {k} must lie in [1, {L - 1}]")
    client_idx = list(range(k))
    full = initial_adapters(kind, ctx)
    global_client = full.restrict(client_idx)
    server = full.restrict(range(k, L))
    version = 0
    local_copy: dict = {}  # client id -> (version, adapters)
    fraction = client_compute_fraction(ctx.base, client_idx)
    client_bytes = adapter_bytes(global_client)
    for r in range(1, ctx.rounds + 1):
        selected = tuple(sorted(int(c) for c in ctx.select(r)))
        sync = r % kind.sync_period_rounds == 0
        clients, down = [], {}
        for cid in selected:
            held = local_copy.get(cid)
            if held is None or held[0] != version:
                held = (version, global_client)
                down[cid] = client_bytes
            else:
                down[cid] = 0
            clients.append(SplitClient(cid, ctx.shards[cid], held[1], _schedule(ctx, r, cid)))
        updated, server, log, losses = split_round(
            ctx.base, clients, server, ctx.train, k, kind.server_side_trainable
        )
        up_stream = {cid: 0 for cid in selected}
        down_stream = {cid: 0 for cid in selected}
        for e in log:
            (up_stream if e.direction == "up" else down_stream)[e.client_id] += e.nbytes
        dropped = {cid: bool(ctx.dropout(r, selected).get(cid, False)) for cid in selected}
        work = []
        for c in clients:
            cid = c.client_id
            work.append(ClientWork(
                cid, ctx.devices[cid], kind.rank, len(c.schedule) * fraction,
                down[cid] + down_stream[cid], up_stream[cid],
                client_bytes if sync else 0, len(c.shard), losses[cid],
            ))
            local_copy[cid] = (version, updated[cid])
        aggregated = False
        if sync:
            survivors = [ClientPayload(cid, len(ctx.shards[cid]), updated[cid])
                         for cid in selected if not dropped[cid]]
            if survivors:
                global_client = aggregate_fedavg(survivors)
                version += 1
                aggregated = True
        merged = _merge(global_client, server, k)
        yield RoundOutcome(r, selected, tuple(work), dropped, merged, aggregated)
