"""Counter-based deterministic random numbers (SplitMix64).

Every stochastic call in this package takes an explicit CounterRng so that
sampling, weight init and data shuffling are reproducible from a single seed
and independent of call order elsewhere in the process. The generator is the
SplitMix64 finalizer applied to (seed, counter); the counter advances by the
number of values drawn.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer, vectorized over uint64 arrays.
    with np.errstate(over="ignore"):
        z = (x + _GOLDEN).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class CounterRng:
    """Stateful wrapper around SplitMix64(seed, counter).

    State is just (seed, counter), so a stream can be checkpointed, forked
    with `child`, or replayed exactly.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def child(self, stream: int) -> "CounterRng":
        """Derive an independent stream (e.g. one per training worker)."""
        base = _splitmix64(np.array([self.seed ^ (stream * 0x9E3779B9 + 0x1234567)], dtype=np.uint64))
        return CounterRng(int(base[0]))

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            keyed = idx * np.uint64(0x2545F4914F6CDD1D) + np.uint64(self.seed)
        self.counter += n
        return _splitmix64(keyed)

    def uniform(self, n: int | None = None) -> np.ndarray | float:
        """Uniform float64 in [0, 1); scalar when n is None."""
        m = 1 if n is None else int(n)
        u = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return float(u[0]) if n is None else u

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        """Gaussian samples via Box-Muller."""
        n = int(np.prod(shape)) if shape else 1
        u1 = np.maximum(self.uniform(n), 2.0**-53)
        u2 = self.uniform(n)
        g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (std * g).reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, n: int | None = None) -> np.ndarray | int:
        """Uniform integers in [low, high)."""
        m = 1 if n is None else int(n)
        span = high - low
        vals = low + (self._raw(m) % np.uint64(span)).astype(np.int64)
        return int(vals[0]) if n is None else vals

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def categorical(self, probs: np.ndarray) -> int:
        """Draw one index from a probability vector by CDF inversion."""
        cdf = np.cumsum(probs.astype(np.float64))
        cdf /= cdf[-1]
        return int(np.searchsorted(cdf, self.uniform(), side="right"))
