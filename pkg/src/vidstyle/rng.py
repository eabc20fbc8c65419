"""Seeded random streams.

Every consumer derives its own stream from a root seed plus a tuple of
integer keys, so adding a new consumer never shifts another one's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def make_rng(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *keys) -> int:
    return int(make_rng(seed, *keys).integers(0, 2**31 - 1))
