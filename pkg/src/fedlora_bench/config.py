"""Scenario configuration: TOML loading, validation and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Union, get_args, get_origin, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .edge_sim import DEVICE_ORDER, ConfigError, profiles_with_overrides
from .fed_methods import DEFAULT_RANK_MAP, MethodKind, StrategyKind
from .perturbations import PerturbationKind, PerturbationSpec, balanced_mix, parse_mix

SEED_ENV = "FEDLORA_SEED"


@dataclass(frozen=True)
class ScenarioSection:
    name: str = "default"
    seed: int = 0
    rounds: int = 50
    clients_per_round: int = 10
    eval_every: int = 1
    early_stop_patience: int = 0  # evaluations without improvement; 0 disables


@dataclass(frozen=True)
class ModelSection:
    hidden_dims: tuple = (32, 32)
    pretrained_noise: float = 0.35
    init_std: float = 0.02
    alpha: Optional[float] = None  # defaults to the rank


@dataclass(frozen=True)
class TaskSection:
    input_dim: int = 32
    num_classes: int = 10
    samples_per_client: int = 64
    non_iid_concentration: float = 0.5
    test_size: int = 1000
    teacher_gain: float = 2.0


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    local_epochs: int = 1


@dataclass(frozen=True)
class MethodSection:
    kind: str = "fedavg_lora"
    rank: int = 8
    mu: float = 0.01
    rank_map: dict = field(default_factory=lambda: dict(DEFAULT_RANK_MAP))
    sync_period_rounds: int = 1
    split_layer_index: int = 1
    server_side_trainable: bool = True


@dataclass(frozen=True)
class ClientsSection:
    pool_size: int = 100
    mix: Optional[Union[str, dict]] = None  # counts per device class, or a label like "70J+20I+10P"


@dataclass(frozen=True)
class PerturbationSection:
    kind: str = "none"
    dropout_ratio: float = 0.0
    mix: Optional[Union[str, dict]] = None


@dataclass(frozen=True)
class SystemSection:
    server_aggregation_seconds: float = 1.0
    runtime_overhead_mb: float = 1.0
    dropout_timeout_factor: float = 1.5


@dataclass(frozen=True)
class BudgetSection:
    comm_mb: Optional[float] = None
    wall_clock_hours: Optional[float] = None
    energy_kj: Optional[float] = None
    memory_mb: Optional[float] = None


@dataclass(frozen=True)
class TargetsSection:
    percents: Optional[tuple] = None  # explicit overrides, e.g. [62, 63, 64]
    fractions: tuple = (0.5, 0.7, 0.9)


@dataclass(frozen=True)
class DeviceOverride:
    steps_per_second: Optional[float] = None
    memory_capacity_mb: Optional[float] = None
    active_power_watts: Optional[float] = None
    comm_power_watts: Optional[float] = None
    bandwidth_mbps: Optional[float] = None

    def fields(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: ScenarioSection = ScenarioSection()
    model: ModelSection = ModelSection()
    task: TaskSection = TaskSection()
    training: TrainingSection = TrainingSection()
    method: MethodSection = MethodSection()
    clients: ClientsSection = ClientsSection()
    perturbation: PerturbationSection = PerturbationSection()
    system: SystemSection = SystemSection()
    devices: dict = field(default_factory=dict)  # name -> DeviceOverride
    budget: BudgetSection = BudgetSection()
    targets: TargetsSection = TargetsSection()

    # derived views -------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.scenario.seed

    def strategy(self) -> StrategyKind:
        m = self.method
        return StrategyKind(MethodKind(m.kind), m.rank, m.mu, dict(m.rank_map),
                            m.sync_period_rounds, m.split_layer_index, m.server_side_trainable)

    def perturbation_spec(self) -> PerturbationSpec:
        p = self.perturbation
        mix = _mix_counts(p.mix) if p.mix is not None else None
        return PerturbationSpec(PerturbationKind(p.kind), p.dropout_ratio, mix)

    def client_mix(self) -> dict:
        spec = self.perturbation_spec()
        if spec.kind is PerturbationKind.MIX:
            return dict(spec.mix)
        if self.clients.mix is not None:
            return _mix_counts(self.clients.mix)
        return balanced_mix(self.clients.pool_size)

    def profiles(self) -> dict:
        return profiles_with_overrides({k: v.fields() for k, v in self.devices.items()})

    def to_dict(self) -> dict:
        return _plain(self)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()

    def replace(self, **sections) -> "ScenarioConfig":
        """Shallow override, e.g. ``cfg.replace(method={"kind": "split_lora"})``."""
        merged = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, Mapping) and isinstance(merged.get(k), dict):
                merged[k] = {**merged[k], **v}
            else:
                merged[k] = v
        return from_dict(merged)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _mix_counts(mix) -> dict:
    if isinstance(mix, str):
        return parse_mix(mix)
    counts = {name: 0 for name in DEVICE_ORDER}
    counts.update({k: int(v) for k, v in mix.items()})
    return counts


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# loading


def _coerce(value: Any, hint, path: str):
    origin = get_origin(hint)
    if origin is Union:
        args = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        errors = []
        for a in args:
            try:
                return _coerce(value, a, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError(errors[0] if errors else f"{path}: bad value {value!r}")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected array, got {value!r}")
        return tuple(value)
    if hint is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path}: expected table, got {value!r}")
        return dict(value)
    raise ConfigError(f"{path}: unsupported type {hint}")


def _build(cls, data: Mapping, path: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path}: expected table, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        elif cls is ScenarioConfig and key == "devices":
            kwargs[key] = {name: _build(DeviceOverride, v, f"{sub}.{name}")
                           for name, v in _coerce(value, dict, sub).items()}
        else:
            kwargs[key] = _coerce(value, hint, sub)
    return cls(**kwargs)


def from_dict(data: Mapping, env: Optional[Mapping] = None) -> ScenarioConfig:
    cfg = _build(ScenarioConfig, data, "")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected integer, got {env[SEED_ENV]!r}") from None
        cfg = dataclasses.replace(cfg, scenario=dataclasses.replace(cfg.scenario, seed=seed))
    validate(cfg)
    return cfg


def load_config(path, env: Optional[Mapping] = None) -> ScenarioConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_dict(data, env)


def _require(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def validate(cfg: ScenarioConfig) -> None:
    s, t, m, task = cfg.scenario, cfg.training, cfg.method, cfg.task
    _require(0 <= s.seed < 2**64, "scenario.seed", "must be a 64-bit non-negative integer")
    _require(s.rounds >= 1, "scenario.rounds", "must be >= 1")
    _require(s.eval_every >= 1, "scenario.eval_every", "must be >= 1")
    _require(s.early_stop_patience >= 0, "scenario.early_stop_patience", "must be >= 0")
    _require(cfg.clients.pool_size >= 1, "clients.pool_size", "must be >= 1")
    _require(1 <= s.clients_per_round <= cfg.clients.pool_size, "scenario.clients_per_round",
             f"must lie in [1, clients.pool_size={cfg.clients.pool_size}]")
    _require(len(cfg.model.hidden_dims) >= 1 and all(isinstance(h, int) and h > 0 for h in cfg.model.hidden_dims),
             "model.hidden_dims", "must be a non-empty list of positive integers")
    _require(cfg.model.pretrained_noise >= 0, "model.pretrained_noise", "must be >= 0")
    _require(task.input_dim >= 1, "task.input_dim", "must be >= 1")
    _require(task.num_classes >= 2, "task.num_classes", "must be >= 2")
    _require(task.samples_per_client >= 1, "task.samples_per_client", "must be >= 1")
    _require(task.non_iid_concentration > 0, "task.non_iid_concentration", "must be > 0")
    _require(task.test_size >= 1, "task.test_size", "must be >= 1")
    _require(t.learning_rate > 0, "training.learning_rate", "must be > 0")
    _require(t.weight_decay >= 0, "training.weight_decay", "must be >= 0")
    _require(0 <= t.beta1 < 1, "training.beta1", "must lie in [0, 1)")
    _require(0 <= t.beta2 < 1, "training.beta2", "must lie in [0, 1)")
    _require(t.epsilon > 0, "training.epsilon", "must be > 0")
    _require(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    _require(t.local_epochs >= 1, "training.local_epochs", "must be >= 1")
    try:
        MethodKind(m.kind)
    except ValueError:
        raise ConfigError(f"method.kind: unknown method {m.kind!r}") from None
    _require(m.rank >= 1, "method.rank", "must be >= 1")
    _require(m.mu >= 0, "method.mu", "must be >= 0")
    _require(m.sync_period_rounds >= 1, "method.sync_period_rounds", "must be >= 1")
    n_layers = len(cfg.model.hidden_dims) + 1
    _require(1 <= m.split_layer_index < n_layers, "method.split_layer_index",
             f"must lie in [1, {n_layers - 1}]")
    for name, r in m.rank_map.items():
        _require(name in DEVICE_ORDER, f"method.rank_map.{name}", "unknown device class")
        _require(isinstance(r, int) and r >= 1, f"method.rank_map.{name}", "must be a positive integer")
    dims = [task.input_dim, *cfg.model.hidden_dims, task.num_classes]
    max_rank = min(min(a, b) for a, b in zip(dims[:-1], dims[1:]))
    ranks = [m.rank] + (list(m.rank_map.values()) if m.kind == MethodKind.HETERO.value else [])
    _require(max(ranks) <= max_rank, "method.rank", f"rank exceeds smallest layer width {max_rank}")
    try:
        PerturbationKind(cfg.perturbation.kind)
    except ValueError:
        raise ConfigError(f"perturbation.kind: unknown kind {cfg.perturbation.kind!r}") from None
    _require(0 <= cfg.perturbation.dropout_ratio < 1, "perturbation.dropout_ratio", "must lie in [0, 1)")
    try:
        mix = cfg.client_mix()
        cfg.perturbation_spec()
    except ConfigError as e:
        raise ConfigError(f"clients.mix: {e}") from None
    for name, v in mix.items():
        _require(name in DEVICE_ORDER, f"clients.mix.{name}", "unknown device class")
        _require(v >= 0, f"clients.mix.{name}", "must be >= 0")
    _require(sum(mix.values()) == cfg.clients.pool_size, "clients.mix",
             f"counts sum to {sum(mix.values())}, pool size is {cfg.clients.pool_size}")
    if m.kind == MethodKind.HETERO.value:
        for name, v in mix.items():
            _require(v == 0 or name in m.rank_map, f"method.rank_map.{name}", "missing rank for device class in use")
    for name in cfg.devices:
        _require(name in DEVICE_ORDER, f"devices.{name}", "unknown device class")
    try:
        cfg.profiles()
    except (ConfigError, TypeError) as e:
        raise ConfigError(f"devices: {e}") from None
    sysc = cfg.system
    _require(sysc.server_aggregation_seconds >= 0, "system.server_aggregation_seconds", "must be >= 0")
    _require(sysc.runtime_overhead_mb >= 0, "system.runtime_overhead_mb", "must be >= 0")
    _require(sysc.dropout_timeout_factor > 1, "system.dropout_timeout_factor", "must be > 1")
    for k, v in dataclasses.asdict(cfg.budget).items():
        _require(v is None or v >= 0, f"budget.{k}", "must be >= 0")
    if cfg.targets.percents is not None:
        for i, p in enumerate(cfg.targets.percents):
            _require(isinstance(p, (int, float)) and 0 <= p <= 100, f"targets.percents[{i}]", "must lie in [0, 100]")
    for i, f in enumerate(cfg.targets.fractions):
        _require(isinstance(f, (int, float)) and 0 <= f <= 1, f"targets.fractions[{i}]", "must lie in [0, 1]")
