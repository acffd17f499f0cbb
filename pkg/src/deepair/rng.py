"""Seeded random number generation.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's PCG64 generator. PCG64 draw sequences are fixed by seed, so
any pipeline stage is reproducible from its seed alone. Named child streams
are derived by hashing, which keeps independent stages (init, shuffling,
noise) decoupled from each other's consumption order.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Deterministic random stream (PCG64) with named sub-streams."""

    def __init__(self, seed: int):
        if not (0 <= int(seed) < 2**64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, name: str) -> "Rng":
        """Derive an independent stream keyed by (seed, name)."""
        digest = hashlib.sha256(f"{self.seed}:{name}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, mean: float = 0.0, std: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle of a Python list."""
        for i in range(len(items) - 1, 0, -1):
            j = int(self._gen.integers(0, i + 1))
            items[i], items[j] = items[j], items[i]
