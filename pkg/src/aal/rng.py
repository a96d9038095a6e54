"""Counter-based random generators keyed by small integers.

Philox generators keyed by (seed, purpose, ...) make shuffling and random
initialization reproducible independently of call order or thread count.
"""
from __future__ import annotations

import numpy as np

__all__ = ["keyed_rng"]

_MIX = 0x9E3779B97F4A7C15  # 64-bit golden-ratio mixer


def keyed_rng(*keys):
    """Generator seeded by a tuple of small non-negative integers."""
    if not keys:
        raise ValueError("keyed_rng: need at least one key component")
    k0 = int(keys[0]) & 0xFFFFFFFFFFFFFFFF
    k1 = 0
    for v in keys[1:]:
        k1 = ((k1 ^ int(v)) * _MIX) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=[k0, k1]))
