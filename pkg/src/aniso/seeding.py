"""Seed derivation.

Every random stream is keyed by (master seed, purpose tag, indices...), so a
new grid point or an extra seed never shifts the randomness of existing runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def tag_id(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def seed_sequence(master: int, tag: str, *indices: int) -> np.random.SeedSequence:
    if master < 0 or any(i < 0 for i in indices):
        raise ValueError("seeds and stream indices must be non-negative")
    return np.random.SeedSequence([int(master), tag_id(tag), *map(int, indices)])


def rng(master: int, tag: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master, tag, *indices)))


def derived_seed(master: int, tag: str, *indices: int) -> int:
    """A 63-bit integer seed, for handing to components that take plain ints."""
    return int(seed_sequence(master, tag, *indices).generate_state(1, np.uint64)[0] >> np.uint64(1))
