"""Named, reproducible RNG streams derived from one run seed.

Every source of randomness in a run (init, minibatch order, encoder noise,
splits, ...) gets its own stream so that two configurations sharing a seed
also share data order even when they consume different amounts of noise.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the (seed, name) pair; stable across platforms."""
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))
