"""Seeded random streams.

Every stochastic component (weight init, dropout masks, augmentation, data
shuffling, splits) draws from a named child of one root seed.  The bit
generator is PCG64 (O'Neill's permuted congruential generator, 128-bit
state, multiplier 0x2360ED051FC65DA44385DF649FCCF645, XSL-RR output), whose
raw stream is defined independently of platform and byte order.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64"
_MASK64 = (1 << 64) - 1


class RngState:
    """A 64-bit seed plus a PCG64 stream derived from it.

    ``child(name)`` yields an independent stream keyed by ``name`` so that,
    for example, adding a dropout layer never perturbs the initial weights.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & _MASK64
        self.algorithm = ALGORITHM
        self._key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "RngState":
        return RngState(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    # thin pass-throughs; keep call sites short
    def uniform(self, low, high, size=None):
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, algorithm={self.algorithm!r}, key={self._key})"
