"""Counter-based random streams built on Philox.

Every stochastic operation in this package takes an explicit ``RngStream``.
A stream is identified by (seed, stream_id); drawing from it never mutates
shared state, and distinct stream ids produce independent draws no matter
how much is consumed from other streams.  Philox is counter-based, so the
first k values of a stream are fixed regardless of how many values a caller
asks for: row i of a vectorized draw is a pure function of (seed, stream_id,
counter, i).  That property is what lets per-position corruption and
per-position Gumbel noise be derandomized by position index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    """One round of splitmix64; decorrelates derived stream ids."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by (seed, stream_id, counter)."""

    seed: int
    stream_id: int = 0
    counter: int = 0

    def child(self, *ids: int) -> "RngStream":
        """Derive an independent stream by mixing ids into stream_id."""
        sid = self.stream_id
        for i in ids:
            sid = _splitmix64(sid ^ (i & _MASK64))
        return RngStream(self.seed, sid, 0)

    def with_counter(self, counter: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, counter)

    def generator(self) -> np.random.Generator:
        """Fresh numpy Generator positioned at this stream's counter."""
        bitgen = np.random.Philox(
            key=[self.seed & _MASK64, self.stream_id & _MASK64],
            counter=[self.counter & _MASK64, 0, 0, 0],
        )
        return np.random.Generator(bitgen)

    # Convenience draws.  Each call creates a fresh generator, so repeated
    # calls on the same stream return identical values; derive children for
    # distinct draws.

    def uniforms(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator().random(shape, dtype=dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def normals(self, shape) -> np.ndarray:
        return self.generator().standard_normal(shape)

    def dirichlet(self, alpha) -> np.ndarray:
        return self.generator().dirichlet(alpha)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)
