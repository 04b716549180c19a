"""Deterministic RNG streams derived from one root seed plus string tags.

Every stochastic component draws from its own named stream, so adding a
consumer never shifts the draws of another, and the same (seed, tags)
pair yields the same stream on any platform.
"""

from __future__ import annotations

import zlib

import numpy as np


def seed_stream(seed: int, *tags) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF] + [
        zlib.crc32(str(t).encode("utf-8")) for t in tags
    ]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
