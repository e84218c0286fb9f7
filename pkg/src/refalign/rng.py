"""Deterministic random streams built on the counter-based Philox generator.

An ``Rng`` is identified by (seed, stream). The same pair yields the same
draw sequence on every platform and run, and independent streams never
collide, which lets data generation, training steps and sampling each own
their randomness.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix(a: int, b: int) -> int:
    """SplitMix64-style mixer for deriving child stream ids."""
    z = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class Rng:
    """A named Philox stream with deterministic child derivation."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def child(self, index: int) -> "Rng":
        """Derive an independent stream; (seed, stream, index) is the identity."""
        return Rng(self.seed, _mix(self.stream, int(index)))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        out = self._gen.standard_normal(shape, dtype=np.float32)
        if scale != 1.0:
            out = out * np.float32(scale)
        return out

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(np.float32)

    def integers(self, low: int, high: int, shape=()):
        return self._gen.integers(low, high, size=shape)

    def random(self) -> float:
        return float(self._gen.random())

    def choice(self, options, p=None):
        return self._gen.choice(options, p=p)

    def shuffle(self, arr) -> None:
        self._gen.shuffle(arr)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"
