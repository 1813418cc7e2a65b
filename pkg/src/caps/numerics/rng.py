"""Seeded, counter-based randomness.

Built on numpy's Philox bit generator: a 64-bit counter-based design whose
draw sequence depends only on (seed, draw order), not on threading or
platform, which is what keeps whole training runs byte-reproducible.
"""

from __future__ import annotations

import numpy as np

from .engine import Array

__all__ = ["Rng"]


class Rng:
    """Deterministic random stream with derivable child streams.

    ``child(*keys)`` returns an independent stream that is a pure function
    of (seed, keys); components (init, shuffling, dropout) each derive their
    own child so that consumption order in one component never perturbs
    another.
    """

    def __init__(self, seed: int, _sequence: np.random.SeedSequence | None = None):
        self.seed = int(seed)
        self._sequence = (
            np.random.SeedSequence(self.seed) if _sequence is None else _sequence
        )
        self._gen = np.random.Generator(np.random.Philox(self._sequence))

    def child(self, *keys: int) -> "Rng":
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(k) for k in keys))
        return Rng(self.seed, seq)

    # -- draws ---------------------------------------------------------------

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0) -> Array:
        return Array(self._gen.normal(loc=mean, scale=std, size=shape))

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> Array:
        return Array(self._gen.uniform(low, high, size=shape))

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
