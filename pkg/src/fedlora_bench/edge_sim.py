"""Simulated edge system: device profiles, client selection and cost accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np

BYTES_PER_ELEMENT = 8
MEBIBYTE = 1 << 20
DEVICE_ORDER = ("Jetson", "IQOO", "P50", "Mate20", "Nova9")


class ConfigError(ValueError):
    """Invalid simulation parameters."""


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    steps_per_second: float
    memory_capacity_mb: float
    active_power_watts: float
    comm_power_watts: float
    bandwidth_mbps: float

    def __post_init__(self):
        for f in ("steps_per_second", "memory_capacity_mb", "active_power_watts",
                  "comm_power_watts", "bandwidth_mbps"):
            v = getattr(self, f)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{self.name}.{f} must be > 0, got {v!r}")


DEFAULT_PROFILES = {
    "Jetson": DeviceProfile("Jetson", 50.0, 8192.0, 15.0, 3.0, 100.0),
    "IQOO": DeviceProfile("IQOO", 40.0, 16384.0, 8.0, 2.0, 100.0),
    "P50": DeviceProfile("P50", 25.0, 8192.0, 6.0, 2.0, 100.0),
    "Mate20": DeviceProfile("Mate20", 15.0, 6144.0, 5.0, 2.0, 100.0),
    "Nova9": DeviceProfile("Nova9", 10.0, 8192.0, 5.0, 2.0, 100.0),
}


def profiles_with_overrides(overrides: Optional[Mapping[str, Mapping]] = None) -> dict:
    out = dict(DEFAULT_PROFILES)
    for name, fields in (overrides or {}).items():
        if name not in out:
            raise ConfigError(f"unknown device class {name!r}")
        out[name] = replace(out[name], **fields)
    return out


@dataclass(frozen=True)
class ClientRecord:
    client_id: int
    device: str
    rank: Optional[int] = None


# ---------------------------------------------------------------------------
# selection and timing


def select_clients(pool_size: int, count: int, rng: np.random.Generator) -> tuple:
    """Uniform sample without replacement, returned sorted by client id."""
    if count < 1 or count > pool_size:
        raise ConfigError(f"clients_per_round {count} must lie in [1, {pool_size}]")
    picked = rng.choice(pool_size, size=count, replace=False)
    return tuple(sorted(int(c) for c in picked))


def round_wall_clock(durations: Sequence[float], server_aggregation_seconds: float = 1.0) -> float:
    if len(durations) == 0:
        raise ValueError("need at least one duration")
    return max(durations) + server_aggregation_seconds


@dataclass(frozen=True)
class ClientCost:
    train_seconds: float
    comm_seconds: float
    energy_kj: float
    peak_memory_mb: float

    @property
    def total_seconds(self) -> float:
        return self.train_seconds + self.comm_seconds


def comm_seconds(profile: DeviceProfile, nbytes: int, multiplier: float = 1.0) -> float:
    if not 0 < multiplier <= 1:
        raise ValueError(f"bandwidth multiplier must lie in (0, 1], got {multiplier}")
    return nbytes * 8 / (profile.bandwidth_mbps * multiplier * 1e6)


def energy_kj(profile: DeviceProfile, train_s: float, comm_s: float) -> float:
    return (profile.active_power_watts * train_s + profile.comm_power_watts * comm_s) / 1000.0


def client_costs(profile: DeviceProfile, down_bytes: int, up_bytes: int, train_steps: float,
                 multiplier: float = 1.0, peak_memory_mb: float = 0.0) -> ClientCost:
    train_s = train_steps / profile.steps_per_second
    comm_s = comm_seconds(profile, down_bytes + up_bytes, multiplier)
    return ClientCost(train_s, comm_s, energy_kj(profile, train_s, comm_s), peak_memory_mb)


def dropped_client_costs(profile: DeviceProfile, nominal: ClientCost, deadline_s: float) -> ClientCost:
    """A dropped client keeps its radio busy until the server gives up at ``deadline_s``."""
    comm_s = max(nominal.comm_seconds, deadline_s - nominal.train_seconds)
    return ClientCost(nominal.train_seconds, comm_s,
                      energy_kj(profile, nominal.train_seconds, comm_s), nominal.peak_memory_mb)


# ---------------------------------------------------------------------------
# memory


def memory_elements(layer_dims: Sequence[tuple], rank: int, batch_size: int,
                    layers: Optional[Sequence[int]] = None) -> dict:
    """Element counts of every buffer held by a client for the given layers."""
    idx = list(range(len(layer_dims))) if layers is None else sorted(layers)
    frozen = sum(layer_dims[i][0] * layer_dims[i][1] + layer_dims[i][1] for i in idx)
    trainable = sum(rank * (layer_dims[i][0] + layer_dims[i][1]) for i in idx)
    widths = [layer_dims[idx[0]][0]] + [layer_dims[i][1] for i in idx] if idx else []
    return {
        "frozen": frozen,
        "trainable": trainable,
        "gradients": trainable,
        "moments": 2 * trainable,
        "activations": batch_size * sum(widths),
    }


def memory_footprint(layer_dims: Sequence[tuple], rank: int, batch_size: int,
                     layers: Optional[Sequence[int]] = None, overhead_mb: float = 1.0) -> float:
    """Peak client memory in MiB for training the given layers with LoRA rank ``rank``."""
    total = sum(memory_elements(layer_dims, rank, batch_size, layers).values())
    return total * BYTES_PER_ELEMENT / MEBIBYTE + overhead_mb


def check_feasibility(footprints: Mapping[int, float], devices: Mapping[int, DeviceProfile]) -> bool:
    """False if any client's footprint is strictly above its device capacity."""
    return all(footprints[c] <= devices[c].memory_capacity_mb for c in footprints)


# ---------------------------------------------------------------------------
# ledger


@dataclass(frozen=True)
class ClientRoundCost:
    client_id: int
    device: str
    train_seconds: float
    comm_seconds: float
    down_bytes: int
    up_bytes: int
    energy_kj: float
    peak_memory_mb: float
    dropped: bool


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    selected: tuple
    clients: tuple  # ClientRoundCost in client-id order
    bandwidth_multiplier: float
    wall_clock_seconds: float
    comm_bytes: int
    energy_kj: float
    aggregated: bool
    train_loss: float
    cum_wall_clock_seconds: float
    cum_comm_bytes: int
    cum_energy_kj: float
    mean_peak_memory_mb: float
    max_peak_memory_mb: float
    eval_loss: Optional[float] = None
    eval_accuracy: Optional[float] = None

    @property
    def cum_wall_clock_hours(self) -> float:
        return self.cum_wall_clock_seconds / 3600.0

    @property
    def cum_comm_mb(self) -> float:
        return self.cum_comm_bytes / 1e6

    @property
    def has_eval(self) -> bool:
        return self.eval_accuracy is not None


@dataclass
class CostLedger:
    wall_clock_seconds: float = 0.0
    comm_bytes: int = 0
    energy_kj: float = 0.0
    peak_memory_mb: dict = field(default_factory=dict)

    @property
    def wall_clock_hours(self) -> float:
        return self.wall_clock_seconds / 3600.0

    @property
    def comm_mb(self) -> float:
        return self.comm_bytes / 1e6

    @property
    def participants(self) -> frozenset:
        return frozenset(self.peak_memory_mb)

    def mean_peak_memory(self) -> float:
        if not self.peak_memory_mb:
            return 0.0
        return sum(self.peak_memory_mb[c] for c in sorted(self.peak_memory_mb)) / len(self.peak_memory_mb)

    def max_peak_memory(self) -> float:
        return max(self.peak_memory_mb.values(), default=0.0)

    def commit(self, round_index, selected, clients: Sequence[ClientRoundCost], multiplier,
               server_seconds, aggregated, train_loss, evaluation=None) -> RoundRecord:
        """Fold one round into the ledger, in client-id order, and return its record."""
        clients = tuple(sorted(clients, key=lambda c: c.client_id))
        wall = round_wall_clock([c.train_seconds + c.comm_seconds for c in clients], server_seconds)
        nbytes = sum(c.down_bytes + c.up_bytes for c in clients)
        energy = math.fsum(c.energy_kj for c in clients)
        self.wall_clock_seconds += wall
        self.comm_bytes += nbytes
        self.energy_kj += energy
        for c in clients:
            prev = self.peak_memory_mb.get(c.client_id, 0.0)
            self.peak_memory_mb[c.client_id] = max(prev, c.peak_memory_mb)
        return RoundRecord(
            round_index=round_index,
            selected=tuple(selected),
            clients=clients,
            bandwidth_multiplier=multiplier,
            wall_clock_seconds=wall,
            comm_bytes=nbytes,
            energy_kj=energy,
            aggregated=aggregated,
            train_loss=train_loss,
            cum_wall_clock_seconds=self.wall_clock_seconds,
            cum_comm_bytes=self.comm_bytes,
            cum_energy_kj=self.energy_kj,
            mean_peak_memory_mb=self.mean_peak_memory(),
            max_peak_memory_mb=self.max_peak_memory(),
            eval_loss=None if evaluation is None else evaluation.loss,
            eval_accuracy=None if evaluation is None else evaluation.accuracy,
        )
