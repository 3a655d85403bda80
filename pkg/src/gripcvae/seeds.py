"""Deterministic seed derivation.

Every random draw in the pipeline flows from a single 64-bit seed, fanned
out per consumer (link, candidate, epoch, ...) through `mix64`, so records
can be regenerated independently and in any order.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix64(seed: int, index: int) -> int:
    """Derive a child seed from (seed, index) via the splitmix64 finalizer."""
    z = (seed ^ ((index & _MASK64) * _GOLDEN)) & _MASK64
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def rng_for(seed: int, *indices: int) -> np.random.Generator:
    """PCG64 generator for a seed mixed with a chain of stream indices."""
    for idx in indices:
        seed = mix64(seed, idx)
    return np.random.Generator(np.random.PCG64(seed))
