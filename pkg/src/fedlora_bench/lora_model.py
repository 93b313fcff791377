"""Frozen toy base model, LoRA adapters, synthetic non-IID task and evaluation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rng as rngmod
from .numerics import (
    AdamWState,
    DimensionError,
    adamw_update,
    as_matrix,
    linear_backward,
    linear_forward,
    softmax_cross_entropy,
)

ACTIVATIONS = ("tanh",)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class BaseModel:
    """Frozen stack of linear layers; weights are [in×out], tanh between layers."""

    weights: tuple
    biases: tuple
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight and at least one layer")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {i} input does not chain from layer {i - 1}")
        if self.weights[-1].shape[1] != self.num_classes:
            raise DimensionError("final layer width must equal num_classes")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        return [tuple(w.shape) for w in self.weights]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for w, b in zip(self.weights, self.biases):
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class LoraLayer:
    """Low-rank factors for one layer: delta = (alpha / rank) * B @ A, shape [out×in]."""

    A: np.ndarray  # [rank×in]
    B: np.ndarray  # [out×rank]
    alpha: float

    def __post_init__(self):
        A, B = as_matrix(self.A, "A"), as_matrix(self.B, "B")
        if A.shape[0] != B.shape[1]:
            raise DimensionError(f"A {A.shape} and B {B.shape} disagree on rank")
        if A.shape[0] < 1:
            raise ValueError("rank must be >= 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.B @ self.A)

    def num_elements(self) -> int:
        return self.A.size + self.B.size


@dataclass(frozen=True)
class AdapterSet:
    """Per-layer LoRA entries; ``None`` marks a layer without an adapter."""

    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> Optional[LoraLayer]:
        return self.layers[i]

    @property
    def ranks(self) -> tuple:
        return tuple(None if l is None else l.rank for l in self.layers)

    def num_elements(self, indices: Optional[Sequence[int]] = None) -> int:
        idx = range(len(self.layers)) if indices is None else indices
        return sum(self.layers[i].num_elements() for i in idx if self.layers[i] is not None)

    def with_layers(self, updates: dict) -> "AdapterSet":
        layers = list(self.layers)
        for i, layer in updates.items():
            layers[i] = layer
        return AdapterSet(tuple(layers))

    def restrict(self, indices: Sequence[int]) -> "AdapterSet":
        keep = set(indices)
        return AdapterSet(tuple(l if i in keep else None for i, l in enumerate(self.layers)))

    def check_against(self, base: BaseModel) -> None:
        if len(self.layers) != base.num_layers:
            raise DimensionError(f"{len(self.layers)} adapter slots for {base.num_layers} layers")
        for i, (layer, (fan_in, fan_out)) in enumerate(zip(self.layers, base.layer_dims)):
            if layer is not None and layer.shape != (fan_out, fan_in):
                raise DimensionError(f"adapter {i} shape {layer.shape} != {(fan_out, fan_in)}")


def init_adapters(
    base: BaseModel,
    rank: int,
    rng: np.random.Generator,
    init_std: float = 0.02,
    alpha: Optional[float] = None,
    layers: Optional[Sequence[int]] = None,
) -> AdapterSet:
    """A ~ N(0, init_std²), B = 0 on the requested layers (all by default)."""
    chosen = range(base.num_layers) if layers is None else layers
    out = [None] * base.num_layers
    for i in sorted(chosen):
        fan_in, fan_out = base.layer_dims[i]
        if not 1 <= rank <= min(fan_in, fan_out):
            raise ValueError(f"rank {rank} outside [1, {min(fan_in, fan_out)}] for layer {i}")
        A = rng.normal(0.0, init_std, size=(rank, fan_in))
        out[i] = LoraLayer(A, np.zeros((fan_out, rank)), float(rank if alpha is None else alpha))
    return AdapterSet(tuple(out))


def pad_layer(layer: LoraLayer, r_max: int) -> LoraLayer:
    """Zero-pad A rows / B columns up to ``r_max``; alpha is rescaled so alpha/rank is kept."""
    r = layer.rank
    if r > r_max:
        raise ValueError(f"rank {r} exceeds r_max {r_max}")
    if r == r_max:
        return layer
    A = np.zeros((r_max, layer.A.shape[1]))
    A[:r] = layer.A
    B = np.zeros((layer.B.shape[0], r_max))
    B[:, :r] = layer.B
    return LoraLayer(A, B, layer.scale * r_max)


def truncate_layer(layer: LoraLayer, rank: int) -> LoraLayer:
    """First ``rank`` rows of A and columns of B, keeping alpha/rank."""
    if rank == layer.rank:
        return layer
    if not 1 <= rank < layer.rank:
        raise ValueError(f"cannot truncate rank {layer.rank} to {rank}")
    return LoraLayer(layer.A[:rank].copy(), layer.B[:, :rank].copy(), layer.scale * rank)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class LayerCache:
    x: np.ndarray
    u: Optional[np.ndarray]
    h: np.ndarray


def layer_forward(base: BaseModel, i: int, layer: Optional[LoraLayer], x):
    z = linear_forward(x, base.weights[i], base.biases[i])
    u = None
    if layer is not None:
        u = x @ layer.A.T
        z = z + layer.scale * (u @ layer.B.T)
    h = z if i == base.num_layers - 1 else np.tanh(z)
    return h, LayerCache(x, u, h)


def layer_backward(base: BaseModel, i: int, layer: Optional[LoraLayer], cache: LayerCache, grad_h):
    """Return ``(grad_x, grad_A, grad_B)``; the frozen weight gradient is discarded."""
    g = grad_h if i == base.num_layers - 1 else grad_h * (1.0 - cache.h * cache.h)
    grad_x, _frozen_grad, _ = linear_backward(cache.x, base.weights[i], g)
    if layer is None:
        return grad_x, None, None
    gB_small = g @ layer.B  # [batch×r]
    grad_x = grad_x + layer.scale * (gB_small @ layer.A)
    grad_B = layer.scale * (g.T @ cache.u)
    grad_A = layer.scale * (gB_small.T @ cache.x)
    return grad_x, grad_A, grad_B


def forward_range(base, adapters: AdapterSet, x, start: int, stop: int):
    caches = []
    h = as_matrix(x, "input")
    for i in range(start, stop):
        h, cache = layer_forward(base, i, adapters[i], h)
        caches.append(cache)
    return h, caches


def backward_range(base, adapters: AdapterSet, caches, grad, start: int, stop: int):
    grads = {}
    for i in reversed(range(start, stop)):
        grad, gA, gB = layer_backward(base, i, adapters[i], caches[i - start], grad)
        if gA is not None:
            grads[i] = (gA, gB)
    return grad, grads


def forward_with_adapters(base: BaseModel, adapters: AdapterSet, x) -> np.ndarray:
    adapters.check_against(base)
    logits, _ = forward_range(base, adapters, x, 0, base.num_layers)
    return logits


def base_forward(base: BaseModel, x) -> np.ndarray:
    return forward_with_adapters(base, AdapterSet((None,) * base.num_layers), x)


def loss_and_grads(base, adapters, x, y):
    """Cross-entropy loss and {layer: (grad_A, grad_B)} for every adapted layer."""
    adapters.check_against(base)
    logits, caches = forward_range(base, adapters, x, 0, base.num_layers)
    loss, g = softmax_cross_entropy(logits, y)
    _, grads = backward_range(base, adapters, caches, g, 0, base.num_layers)
    return loss, grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    local_epochs: int = 1

    def adamw_hyper(self) -> dict:
        return dict(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )


@dataclass(frozen=True)
class Prox:
    mu: float
    anchor: AdapterSet


def init_optimizer(adapters: AdapterSet, cfg: TrainConfig, layers=None) -> dict:
    states = {}
    for i, layer in enumerate(adapters.layers):
        if layer is None or (layers is not None and i not in layers):
            continue
        states[(i, "A")] = AdamWState.zeros_like(layer.A, **cfg.adamw_hyper())
        states[(i, "B")] = AdamWState.zeros_like(layer.B, **cfg.adamw_hyper())
    return states


def prox_gradient(grads: dict, adapters: AdapterSet, prox: Optional[Prox]) -> dict:
    """Add mu·(θ − anchor) to each adapter gradient; a no-op when mu == 0."""
    if prox is None or prox.mu == 0:
        return grads
    out = {}
    for i, (gA, gB) in grads.items():
        layer, anchor = adapters[i], prox.anchor[i]
        if anchor is None or anchor.A.shape != layer.A.shape or anchor.B.shape != layer.B.shape:
            raise DimensionError(f"prox anchor for layer {i} does not match adapter shape")
        out[i] = (gA + prox.mu * (layer.A - anchor.A), gB + prox.mu * (layer.B - anchor.B))
    return out


def apply_updates(adapters: AdapterSet, grads: dict, states: dict):
    updates, new_states = {}, dict(states)
    for i, (gA, gB) in sorted(grads.items()):
        layer = adapters[i]
        A, new_states[(i, "A")] = adamw_update(layer.A, gA, states[(i, "A")])
        B, new_states[(i, "B")] = adamw_update(layer.B, gB, states[(i, "B")])
        updates[i] = LoraLayer(A, B, layer.alpha)
    return adapters.with_layers(updates), new_states


def local_train_step(base, adapters, batch, states, prox: Optional[Prox] = None):
    """One AdamW step on the LoRA factors for a single batch.

    Returns ``(new_adapters, new_states, batch_loss)``. Frozen weights are untouched.
    """
    x, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    loss, grads = loss_and_grads(base, adapters, x, y)
    grads = prox_gradient(grads, adapters, prox)
    new_adapters, new_states = apply_updates(adapters, grads, states)
    return new_adapters, new_states, loss


def batch_schedule(n: int, batch_size: int, rng: np.random.Generator, epochs: int = 1) -> list:
    """Index arrays for ``epochs`` shuffled passes; the last batch of a pass may be short."""
    order = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        order.extend(perm[s : s + batch_size] for s in range(0, n, batch_size))
    return order


def train_local(base, adapters, shard, schedule, cfg: TrainConfig, prox=None):
    """Run a fresh-optimizer local session; returns (adapters, mean batch loss, steps)."""
    states = init_optimizer(adapters, cfg)
    losses = []
    for idx in schedule:
        adapters, states, loss = local_train_step(
            base, adapters, (shard.features[idx], shard.labels[idx]), states, prox
        )
        losses.append(loss)
    return adapters, float(np.mean(losses)) if losses else 0.0, len(schedule)


# ---------------------------------------------------------------------------
# task


@dataclass(frozen=True)
class TaskShard:
    features: np.ndarray
    labels: np.ndarray
    client_id: int

    def __post_init__(self):
        if len(self.labels) < 1 or self.features.shape[0] != len(self.labels):
            raise ValueError("shard needs >= 1 sample and one label per row")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float


@dataclass(frozen=True)
class SyntheticTask:
    shards: tuple
    test: TaskShard
    teacher: BaseModel
    label_proportions: np.ndarray = field(repr=False)
    # train and test samples come from separately keyed streams
    test_disjoint: bool = True

    @property
    def train_size(self) -> int:
        return sum(len(s) for s in self.shards)

    def shard(self, client_id: int) -> TaskShard:
        return self.shards[client_id]


def _largest_remainder(props: np.ndarray, n: int) -> np.ndarray:
    raw = props * n
    counts = np.floor(raw).astype(np.int64)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def make_teacher(seed: int, input_dim: int, hidden_dims, num_classes: int, gain: float = 2.0):
    """Random tanh network whose output biases are centred so classes are roughly balanced."""
    g = rngmod.stream(seed, "task.teacher")
    dims = [input_dim, *hidden_dims, num_classes]
    weights = [g.normal(0.0, gain / np.sqrt(a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    probe = g.standard_normal((4096, input_dim))
    logits = base_forward(BaseModel(tuple(weights), tuple(biases), num_classes), probe)
    biases[-1] = -logits.mean(axis=0)
    return BaseModel(tuple(weights), tuple(biases), num_classes)


def _teacher_labels(teacher, x):
    return np.argmax(base_forward(teacher, x), axis=1)


def _client_shard(teacher, seed, cid, n, num_classes, concentration, input_dim):
    g = rngmod.stream(seed, "task.client", cid)
    props = g.dirichlet(np.full(num_classes, float(concentration)))
    need = _largest_remainder(props, n)
    xs, ys = [], []
    for _ in range(10_000):
        if not need.any():
            break
        x = g.standard_normal((256, input_dim))
        y = _teacher_labels(teacher, x)
        for row, label in zip(x, y):
            if need[label]:
                need[label] -= 1
                xs.append(row)
                ys.append(label)
    else:
        raise RuntimeError(f"could not fill shard for client {cid}")
    perm = g.permutation(n)
    return TaskShard(np.array(xs)[perm], np.array(ys, dtype=np.int64)[perm], cid), props


def generate_task(
    seed: int,
    num_clients: int,
    samples_per_client: int,
    input_dim: int,
    num_classes: int,
    non_iid_concentration: float,
    hidden_dims: Sequence[int] = (32, 32),
    test_size: int = 1000,
    teacher_gain: float = 2.0,
) -> SyntheticTask:
    """Planted-teacher classification task split into Dirichlet-skewed client shards.

    Each shard depends only on (seed, client_id); the test set is drawn IID from
    its own stream.
    """
    for name, v in (
        ("num_clients", num_clients),
        ("samples_per_client", samples_per_client),
        ("input_dim", input_dim),
        ("num_classes", num_classes),
        ("test_size", test_size),
    ):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    if not non_iid_concentration > 0:
        raise ValueError("non_iid_concentration must be > 0")
    teacher = make_teacher(seed, input_dim, hidden_dims, num_classes, teacher_gain)
    shards, props = [], []
    for cid in range(num_clients):
        shard, p = _client_shard(
            teacher, seed, cid, samples_per_client, num_classes, non_iid_concentration, input_dim
        )
        shards.append(shard)
        props.append(p)
    g = rngmod.stream(seed, "task.test")
    x = g.standard_normal((test_size, input_dim))
    test = TaskShard(x, _teacher_labels(teacher, x), -1)
    return SyntheticTask(tuple(shards), test, teacher, np.array(props))


def pretrained_base(teacher: BaseModel, seed: int, noise: float) -> BaseModel:
    """Teacher plus seeded Gaussian weight noise, scaled per layer by the weight std."""
    g = rngmod.stream(seed, "base")
    weights = [w + noise * w.std() * g.standard_normal(w.shape) for w in teacher.weights]
    biases = [b.copy() for b in teacher.biases]
    return BaseModel(tuple(weights), tuple(biases), teacher.num_classes, teacher.activation)


def evaluate(base: BaseModel, adapters: AdapterSet, test: TaskShard) -> EvalResult:
    """Mean cross-entropy and argmax accuracy; ties go to the lowest class index."""
    logits = forward_with_adapters(base, adapters, test.features)
    loss, _ = softmax_cross_entropy(logits, test.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == test.labels))
    return EvalResult(loss, acc)


# ---------------------------------------------------------------------------
# reference runs


def train_centroid(base, task: SyntheticTask, rounds: int, cfg: TrainConfig, seed: int,
                   rank: int = 8, init_std: float = 0.02, alpha=None) -> list:
    """Centralised fine-tuning on the union of all shards; one pass per round."""
    pooled = TaskShard(
        np.concatenate([s.features for s in task.shards]),
        np.concatenate([s.labels for s in task.shards]),
        0,
    )
    adapters = init_adapters(base, rank, rngmod.stream(seed, "init"), init_std, alpha)
    history = []
    for r in range(1, rounds + 1):
        sched = batch_schedule(len(pooled), cfg.batch_size, rngmod.stream(seed, "centroid", r), cfg.local_epochs)
        adapters, _, _ = train_local(base, adapters, pooled, sched, cfg)
        history.append((r, evaluate(base, adapters, task.test)))
    return history


def train_local_only(base, task: SyntheticTask, rounds: int, cfg: TrainConfig, seed: int,
                     rank: int = 8, init_std: float = 0.02, alpha=None, eval_every: int = 1) -> list:
    """Per-client training without aggregation; metrics averaged over clients."""
    init = init_adapters(base, rank, rngmod.stream(seed, "init"), init_std, alpha)
    local = [init] * len(task.shards)
    history = []
    for r in range(1, rounds + 1):
        for cid, shard in enumerate(task.shards):
            sched = batch_schedule(len(shard), cfg.batch_size, rngmod.stream(seed, "batches", r, cid), cfg.local_epochs)
            local[cid], _, _ = train_local(base, local[cid], shard, sched, cfg)
        if r % eval_every == 0 or r == rounds:
            res = [evaluate(base, a, task.test) for a in local]
            history.append((r, EvalResult(float(np.mean([e.loss for e in res])),
                                          float(np.mean([e.accuracy for e in res])))))
    return history
