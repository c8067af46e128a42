"""Deterministic RNG derivation.

Every random draw in the project comes from a generator derived from a
tuple of keys (purpose tag, seed, iteration, slot, ...).  Streams with
different keys are statistically independent, so e.g. disabling the
unlabeled branch of a training step cannot perturb the labeled batch.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_entropy(key) -> int:
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        # SeedSequence entropy words must be non-negative
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    raise TypeError(f"rng key must be int or str, got {type(key).__name__}")


def derive_rng(*keys) -> np.random.Generator:
    """Generator that is a pure function of the key tuple."""
    if not keys:
        raise ValueError("at least one key required")
    entropy = [_as_entropy(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def seed_keys(seed) -> tuple:
    """Normalize an int-or-tuple seed into a key tuple."""
    return tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
