"""Modality presence masks: one uint8 per sample, bit m set when modality m is present."""

from __future__ import annotations

import string

import numpy as np


def drop_with_keep_one(masks: np.ndarray, probs, rng: np.random.Generator, return_raw: bool = False):
    """Independently drop present modalities; restore one at random if all would go.

    ``probs`` holds one drop probability per modality. Exactly two uniform
    streams are consumed per call (an n x M block and an n-vector), whatever
    the outcome, so downstream draws stay aligned.
    """
    masks = np.asarray(masks, dtype=np.uint8)
    probs = np.asarray(probs, dtype=float)
    M = len(probs)
    bits = ((masks[:, None] >> np.arange(M)) & 1).astype(bool)
    drop = rng.random(masks.shape + (M,)) < probs
    pick = rng.random(masks.shape)
    keep = bits & ~drop
    empty = ~keep.any(axis=1) & bits.any(axis=1)
    if empty.any():
        b = bits[empty]
        which = np.floor(pick[empty] * b.sum(axis=1)).astype(int)
        rank = np.cumsum(b, axis=1) - 1
        keep[empty] = b & (rank == which[:, None])
    out = (keep * (1 << np.arange(M))).sum(axis=1).astype(np.uint8)
    if return_raw:
        return out, drop & bits
    return out


def full_mask(n: int, M: int) -> np.ndarray:
    return np.full(n, (1 << M) - 1, dtype=np.uint8)


def subset_name(mask: int, M: int) -> str:
    """Bit mask -> modality letters, e.g. 0b11 -> 'AB'."""
    return "".join(string.ascii_uppercase[m] for m in range(M) if mask >> m & 1)


def subset_mask(name: str) -> int:
    return sum(1 << string.ascii_uppercase.index(c) for c in name)


def nonempty_subsets(M: int) -> list[int]:
    """All 2**M - 1 nonempty subsets, singletons first then by size, ties by value."""
    return sorted(range(1, 1 << M), key=lambda s: (bin(s).count("1"), s))
