"""Seeded, splittable random streams.

Every stochastic operation in the package (dropout, augmentation, weight
init, synthetic data) draws from a Philox counter-based generator keyed by
``(seed, *keys)``.  Two calls with the same key path return generators that
produce identical streams, regardless of call order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"negative rng key {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Return a Philox generator for the stream named by ``(seed, *keys)``.

    Keys may be non-negative ints or strings (hashed with CRC32).
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
