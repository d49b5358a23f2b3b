"""Deterministic, hierarchical random streams.

Every stochastic choice in the library (weight init, data synthesis,
selection noise) draws from a named child of a single root seed.  Children
are derived with integer mixing only, so the same (seed, path) pair yields
the same stream on any platform and any process -- which is what makes
checkpoint-resume replay and cross-run comparisons bit-exact.

The mixing functions are the usual suspects: FNV-1a to hash path names and
splitmix64 to scramble state.  The derived 64-bit value seeds a PCG64
generator, so bulk sampling still goes through numpy.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    """FNV-1a hash of a string, as an unsigned 64-bit integer.

    Used instead of the builtin ``hash`` because that one is salted per
    process.
    """
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def splitmix64(x: int) -> int:
    """One splitmix64 scramble step (finalizer included)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class SeedStream:
    """A point in a tree of deterministic random streams.

    ``child(*parts)`` derives a new stream by mixing the (hashed) parts into
    the current state; ``generator()`` hands back a fresh numpy Generator
    seeded from the state.  Typical use::

        root = SeedStream(1234)
        init_rng = root.child("init").generator()
        noise = root.child("noise", epoch, step).generator()

    Deriving the same path twice gives identical generators, so training
    code never has to carry generator objects across steps or checkpoints.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = splitmix64(seed & _MASK64)

    def child(self, *parts: str | int) -> "SeedStream":
        s = SeedStream.__new__(SeedStream)
        x = self.state
        for part in parts:
            if isinstance(part, str):
                x = splitmix64(x ^ fnv1a64(part))
            else:
                x = splitmix64(x ^ (int(part) & _MASK64))
        s.state = x
        return s

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.state))


def uniform_open(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform samples on the open interval (0, 1).

    Draws 53-bit integers in [1, 2**53 - 1] so neither endpoint can occur;
    downstream log() calls are then always finite.
    """
    k = rng.integers(1, 1 << 53, size=shape)
    return k.astype(np.float64) / float(1 << 53)


def gumbel(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    """Gumbel(0, scale) noise; returns zeros when scale is 0."""
    if scale <= 0.0:
        return np.zeros(shape, dtype=np.float64)
    u = uniform_open(rng, shape)
    return -scale * np.log(-np.log(u))
