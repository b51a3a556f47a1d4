"""Deterministic random source with serializable state.

Wraps numpy's PCG64 counter-based generator: the same seed and call sequence
produce identical draws on every platform, and the state round-trips through
plain dicts for checkpointing.
"""

from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape).astype(dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        """JSON-serializable generator state."""
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def child(self, offset: int) -> "Rng":
        """Independent stream derived from this seed (for data vs. training)."""
        return Rng((self.seed + 0x9E3779B97F4A7C15 * (offset + 1)) % 2**64)
