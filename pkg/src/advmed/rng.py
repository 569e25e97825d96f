"""Seed derivation: splitmix64 streams keyed by (seed, purpose tag)."""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """The plain sequential generator; ``next()`` returns the next 64-bit output."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        out = splitmix64(self.state)
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return out


def derive_key(seed: int, *tag) -> int:
    """Fold a purpose tag (strings / ints) into a 64-bit key."""
    h = splitmix64(seed & MASK64)
    for part in tag:
        for b in str(part).encode("utf-8") + b"\x00":
            h = splitmix64(h ^ b)
    return h


def stream(seed: int, *tag) -> np.random.Generator:
    """Independent numpy generator for ``tag`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(derive_key(seed, *tag)))
