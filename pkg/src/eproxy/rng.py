"""Seeded, platform-independent pseudo-random streams.

All stochastic code in the package takes an explicit :class:`Rng`. The
generator is xoshiro256** whose 256-bit state is expanded from a 64-bit seed
with splitmix64, so an identical seed yields an identical stream everywhere.
Bulk draws run in numba-compiled loops; the arithmetic is pure 64-bit integer
math and therefore bit-exact across machines.
"""

from __future__ import annotations

import hashlib
import math
from typing import Sequence, TypeVar

import numba
import numpy as np

MASK64 = (1 << 64) - 1
T = TypeVar("T")


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(next_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def derive_seed(seed: int, *keys: object) -> int:
    """Stable 64-bit seed derived from a parent seed and arbitrary keys.

    Uses sha256 over the textual form, never Python's salted ``hash``.
    """
    text = ":".join([str(int(seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


_U7 = np.uint64(7)
_U9 = np.uint64(9)
_U5 = np.uint64(5)
_U17 = np.uint64(17)
_U45 = np.uint64(45)
_U11 = np.uint64(11)
_U57 = np.uint64(57)
_U19 = np.uint64(19)


@numba.njit(cache=True)
def _next(s):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    x = s1 * _U5
    result = ((x << _U7) | (x >> _U57)) * _U9
    t = s1 << _U17
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = (s3 << _U45) | (s3 >> _U19)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_unit(s, out):
    # 53 high bits -> [0, 1)
    scale = 1.0 / 9007199254740992.0
    for i in range(out.shape[0]):
        out[i] = (_next(s) >> _U11) * scale


@numba.njit(cache=True)
def _fill_normal(s, out):
    scale = 1.0 / 9007199254740992.0
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - (_next(s) >> _U11) * scale  # (0, 1]
        u2 = (_next(s) >> _U11) * scale
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2


@numba.njit(cache=True)
def _fill_below(s, bound, out):
    # rejection keeps the draw exactly uniform over [0, bound)
    b = np.uint64(bound)
    limit = (np.uint64(0xFFFFFFFFFFFFFFFF) // b) * b
    for i in range(out.shape[0]):
        x = _next(s)
        while x >= limit:
            x = _next(s)
        out[i] = np.int64(x % b)


def _size(size) -> int:
    if size is None:
        return 1
    if isinstance(size, int):
        return size
    return int(np.prod(size))


class Rng:
    """xoshiro256** stream seeded through splitmix64."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self._state = np.array(words, dtype=np.uint64)

    @classmethod
    def from_key(cls, seed: int, *keys: object) -> "Rng":
        return cls(derive_seed(seed, *keys))

    def spawn(self, *keys: object) -> "Rng":
        """Child stream keyed off this generator's seed; does not advance the parent."""
        return Rng.from_key(self.seed, *keys)

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(int(v) for v in self._state)

    def next_u64(self, size=None):
        out = np.empty(_size(size), dtype=np.uint64)
        _fill_u64(self._state, out)
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def random(self, size=None):
        """Uniform floats in [0, 1) with 53 bits of resolution."""
        out = np.empty(_size(size), dtype=np.float64)
        _fill_unit(self._state, out)
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        """Gaussian draws via Box-Muller."""
        out = np.empty(_size(size), dtype=np.float64)
        _fill_normal(self._state, out)
        out = loc + scale * out
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def integers(self, bound: int, size=None):
        """Uniform integers in ``[0, bound)``."""
        if bound < 1:
            raise ValueError(f"bound must be >= 1, got {bound}")
        out = np.empty(_size(size), dtype=np.int64)
        _fill_below(self._state, int(bound), out)
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.integers(len(seq))]

    def rademacher(self, size) -> np.ndarray:
        """Values in {-1, +1}, each with probability 1/2."""
        bits = self.next_u64(size) >> np.uint64(63)
        return np.where(bits == 1, 1.0, -1.0)

    def sample_indices(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)`` (partial Fisher-Yates)."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.integers(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> list[int]:
        return self.sample_indices(n, n)
