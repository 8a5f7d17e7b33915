"""Derived RNG streams keyed by (run seed, purpose, client, stage, ...)."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit seed that depends only on ``seed`` and ``keys``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(k) for k in keys])
    return int(ss.generate_state(2, np.uint64)[0] >> np.uint64(1))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
