"""Counter-based, splittable random streams.

Every stream is a Philox generator keyed by ``(seed, stream_id)``; the key
fully determines the output sequence, so streams are reproducible across
platforms and can be derived independently of call order.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, index: int) -> "Rng":
        """Derive an independent stream; depends only on (seed, stream_id, index)."""
        state = np.random.SeedSequence([self.seed, self.stream_id, int(index)]).generate_state(2, np.uint64)
        return Rng(self.seed, int(state[0]) ^ (int(state[1]) << 1))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape)

    def random(self) -> float:
        return float(self.generator.random())

    def integers(self, low: int, high: int, shape=None):
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, p=None) -> int:
        return int(self.generator.choice(n, p=p))
