"""Deterministic seed derivation.

Every random stream in the package is derived from one 64-bit root seed.
A sub-seed for a named purpose is ``splitmix64(root ^ fnv1a64(tag))``, so
streams are independent of each other and of call order.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(root: int, tag: str) -> int:
    """Sub-seed for ``tag`` under ``root``; stable across runs and platforms."""
    return splitmix64((int(root) & MASK64) ^ fnv1a64(tag))


def rng_for(root: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(root, tag)))
