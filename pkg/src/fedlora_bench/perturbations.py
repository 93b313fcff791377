"""System perturbations: bandwidth fluctuation, client dropout, device mixes."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .edge_sim import DEVICE_ORDER, ClientRecord, ConfigError

BANDWIDTH_CYCLE = (1.0, 0.5, 0.25)
CYCLE_HOURS = 1.0


class PerturbationKind(str, enum.Enum):
    NONE = "none"
    BANDWIDTH = "bandwidth"
    DROPOUT = "dropout"
    MIX = "mix"


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind = PerturbationKind.NONE
    dropout_ratio: float = 0.0
    mix: Optional[Mapping[str, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ConfigError(f"dropout_ratio must lie in [0, 1), got {self.dropout_ratio}")
        if self.kind is PerturbationKind.MIX and self.mix is None:
            raise ConfigError("mix perturbation needs per-device counts")

    @property
    def fluctuating(self) -> bool:
        return self.kind is PerturbationKind.BANDWIDTH

    @property
    def effective_dropout(self) -> float:
        return self.dropout_ratio if self.kind is PerturbationKind.DROPOUT else 0.0


def bandwidth_multiplier(sim_time_hours: float) -> float:
    """Piecewise-constant share of nominal bandwidth, cycling every hour.

    Intervals are left-closed: exactly 1/3 h already runs at half bandwidth.
    """
    if sim_time_hours < 0:
        raise ValueError("simulated time must be non-negative")
    n = len(BANDWIDTH_CYCLE)
    # float products land exactly on integers at the thirds, e.g. (1/3) * 3 == 1.0
    slot = int(math.floor(sim_time_hours / CYCLE_HOURS * n)) % n
    return BANDWIDTH_CYCLE[slot]


def apply_dropout(selected: Sequence[int], ratio: float, rng: np.random.Generator) -> dict:
    """Independent Bernoulli drop flags, drawn in client-id order."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"dropout ratio must lie in [0, 1), got {ratio}")
    ids = sorted(selected)
    if ratio == 0.0:
        return {c: False for c in ids}
    draws = rng.random(len(ids))
    return {c: bool(u < ratio) for c, u in zip(ids, draws)}


def parse_mix(label: str) -> dict:
    """Turn a label like ``70J+20I+10P`` into per-device counts."""
    letters = {name[0]: name for name in DEVICE_ORDER}
    counts = {name: 0 for name in DEVICE_ORDER}
    for part in label.replace(" ", "").split("+"):
        if not part or part[-1] not in letters or not part[:-1].isdigit():
            raise ConfigError(f"bad mix term {part!r} in {label!r}")
        counts[letters[part[-1]]] += int(part[:-1])
    return counts


def build_mix(counts: Mapping[str, int], pool_size: int = 100) -> tuple:
    """Assign device classes to client ids 0..N-1 in contiguous J, I, P, M, N blocks."""
    unknown = set(counts) - set(DEVICE_ORDER)
    if unknown:
        raise ConfigError(f"unknown device classes {sorted(unknown)}")
    if any(int(v) < 0 for v in counts.values()):
        raise ConfigError("device counts must be non-negative")
    total = sum(int(v) for v in counts.values())
    if total != pool_size:
        raise ConfigError(f"device counts sum to {total}, pool size is {pool_size}")
    pool, cid = [], 0
    for name in DEVICE_ORDER:
        for _ in range(int(counts.get(name, 0))):
            pool.append(ClientRecord(cid, name))
            cid += 1
    return tuple(pool)


def balanced_mix(pool_size: int = 100) -> dict:
    base, extra = divmod(pool_size, len(DEVICE_ORDER))
    return {name: base + (1 if i < extra else 0) for i, name in enumerate(DEVICE_ORDER)}
