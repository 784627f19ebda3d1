"""Named, counter-based random streams.

Every random draw in the package comes from ``stream(seed, name, *counters)``:
a Philox generator keyed by hashing the seed, a purpose name and integer
counters (iteration, case index, ...). Streams are independent of call
order and thread count, so a run resumed at iteration ``t`` sees the same
numbers as an uninterrupted one.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    if seed < 0 or any(c < 0 for c in counters):
        raise ValueError("seed and counters must be non-negative")
    ss = np.random.SeedSequence([int(seed), _name_key(name), *map(int, counters)])
    return np.random.Generator(np.random.Philox(ss))
