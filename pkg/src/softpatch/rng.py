"""Deterministic seeded random streams.

Every stochastic choice in the package (synthetic data, random projections,
coreset initialisation, noisy-split sampling) is drawn from the stream
defined here, so identical seeds reproduce identical artifacts byte for
byte, including across language ports. The algorithm is pinned:

* State update: splitmix64. Draw ``i`` (1-based) of stream ``seed`` is
  ``mix64(seed + i * 0x9E3779B97F4A7C15)`` with all arithmetic mod 2**64 and

      mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
                z ^= z >> 27; z *= 0x94D049BB133111EB;
                return z ^ (z >> 31)

* Uniform double in [0, 1): ``(u64 >> 11) * 2.0**-53``.
* Standard normals: Box-Muller on consecutive uniform pairs (u1, u2):
  ``r = sqrt(-2 ln(1 - u1))``, ``theta = 2 pi u2``, yielding
  ``r cos(theta)`` then ``r sin(theta)``. ``normals(n)`` always consumes
  ``2 * ceil(n / 2)`` u64 draws (no caching across calls).
* ``randint(n)``: one uniform draw, ``floor(u * n)`` clamped to ``n - 1``.
* ``shuffle``: Fisher-Yates from the last index down, one ``randint`` per
  step.

Because draw ``i`` depends only on ``seed`` and ``i``, batches are generated
with vectorised numpy and the stream position is just a counter.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0**-53


class SplitMix64:
    """Counter-based splitmix64 stream of uniforms, normals and ints."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    @property
    def draws(self) -> int:
        """Number of u64 values consumed so far."""
        return self._count

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit draws as a uint64 array."""
        if n < 0:
            raise ValueError("n must be >= 0")
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            z = self._seed + idx * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
            return z ^ (z >> np.uint64(31))

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` doubles uniform on [0, 1)."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * _U53

    def normals(self, n: int) -> np.ndarray:
        """``n`` standard normal doubles via Box-Muller."""
        pairs = (n + 1) // 2
        u = self.uniforms(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(1.0 - u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randint(self, n: int) -> int:
        """One integer uniform on {0, ..., n-1}."""
        if n <= 0:
            raise ValueError("n must be >= 1")
        return min(int(self.uniforms(1)[0] * n), n - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle (last index down)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_indices(self, population: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(population)``.

        Shuffles the full index list and takes the first ``k``, so the
        draw count depends only on ``population``.
        """
        if not 0 <= k <= population:
            raise ValueError("k out of range")
        idx = list(range(population))
        self.shuffle(idx)
        return idx[:k]
