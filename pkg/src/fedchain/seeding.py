"""Seed derivation shared by every module that draws random numbers."""

import numpy as np

_MASK64 = (1 << 64) - 1


def mix(*parts: int) -> int:
    """Combine integers into one 64-bit seed.

    Order matters: ``mix(a, b) != mix(b, a)`` in general. Negative inputs are
    reduced modulo 2**64 so any Python int is accepted.
    """
    words = []
    for p in parts:
        p = int(p) & _MASK64
        words.extend((p & 0xFFFFFFFF, p >> 32))
    lo, hi = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(mix(*parts))
