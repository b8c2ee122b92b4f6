"""Labelled, reproducible random streams.

A master seed is expanded with splitmix64 into one independent 64-bit seed per
``(label, *indices)`` key; each seed drives its own numpy ``PCG64`` generator.
Streams never share state, so adding draws to one purpose (say, Gumbel noise)
leaves every other purpose bit-identical.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1

INIT = "init"
MIXING = "mixing"
GUMBEL = "gumbel"
DATA = "data"


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns ``(next_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(master: int, label: str, *indices: int) -> int:
    state = (int(master) & MASK64) ^ _fnv1a64(label)
    state, out = splitmix64(state)
    for idx in indices:
        state, out = splitmix64(state ^ (int(idx) & MASK64) ^ out)
    return out


def stream(master: int, label: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, label, *indices)))
