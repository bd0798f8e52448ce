"""
Deterministic RNG streams.

Every random draw in the package comes from a generator keyed by
(seed, *path), e.g. (seed, replicate) or (seed, replicate, attempt), so serial
and threaded runs produce identical numbers.
"""

from __future__ import annotations

import numpy as np


def seed_sequence(seed: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))


def derive_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed for the stream at ``path``."""
    return int(seed_sequence(seed, *path).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))
