"""Seed derivation.

Every random stream in a run is derived from a root seed plus a path of
labels, e.g. ``mix_seed(run_seed, "init", 3)``. Strings are hashed with
BLAKE2b so the mapping is stable across processes and Python versions; the
combination step is splitmix64 on 64-bit words.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        part = int(part)
    if isinstance(part, (int, np.integer)):
        return int(part) & MASK64
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def mix_seed(*parts) -> int:
    """Fold any number of ints/strings into one 64-bit seed."""
    h = 0x6A09E667F3BCC908
    for p in parts:
        h = splitmix64(h ^ _word(p))
    return h


def rng_from(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & MASK64))
