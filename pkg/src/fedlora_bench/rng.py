"""Named random substreams derived from one master seed.

Each stream is keyed by a name and optional integer counters (round index,
client id, ...), so drawing from one stream never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_name_key(name), *map(int, counters)))
    return np.random.Generator(np.random.Philox(ss))
