"""Portable pseudo-random streams: xoshiro256** seeded through splitmix64.

The generator is specified bit-for-bit so that any implementation can
reproduce simulated datasets exactly:

* ``splitmix64(x)`` advances ``x += 0x9E3779B97F4A7C15`` and returns the
  mixed value ``z ^ (z >> 31)`` after the two multiply-xorshift rounds
  (constants ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``).
* ``Xoshiro256(seed)`` fills its four state words with four successive
  splitmix64 outputs starting from ``seed``.
* ``derive_stream(seed, index)`` returns ``Xoshiro256(seed ^ splitmix64_once(index))``
  where ``splitmix64_once(index)`` is the first splitmix64 output for state
  ``index``. Each simulated train owns one stream, so serial and parallel
  runs agree exactly.
* ``uniform()`` is ``(next() >> 11) * 2**-53`` in ``[0, 1)``;
  ``exponential()`` is ``-log(1 - uniform())``.
"""

from __future__ import annotations

import math
from statistics import NormalDist

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_M53 = 2.0**-53
_STD_NORMAL = NormalDist()


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 generator (used only for seeding)."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + _GOLDEN) & MASK64
        return _mix(self.state)


def splitmix64_once(x: int) -> int:
    return SplitMix64(x).next()


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** 1.0 generator with splitmix64 seeding."""

    def __init__(self, seed: int = 0, state: tuple[int, int, int, int] | None = None) -> None:
        if state is None:
            sm = SplitMix64(seed)
            state = (sm.next(), sm.next(), sm.next(), sm.next())
        if not any(state):
            raise ValueError("xoshiro256** state must not be all zero")
        self.s0, self.s1, self.s2, self.s3 = (int(w) & MASK64 for w in state)

    def next(self) -> int:
        # rotations are inlined: this is the hottest function in simulation
        s0, s1, s2, s3 = self.s0, self.s1, self.s2, self.s3
        r = (s1 * 5) & MASK64
        result = ((((r << 7) | (r >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        self.s1 = s1 ^ s2
        self.s0 = s0 ^ s3
        self.s2 = s2 ^ t
        self.s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        return result

    def uniform(self) -> float:
        return (self.next() >> 11) * _TWO_M53

    def uniform_range(self, low: float, high: float) -> float:
        return low + (high - low) * self.uniform()

    def exponential(self) -> float:
        """Standard exponential variate by inversion."""
        return -math.log1p(-self.uniform())

    def bernoulli(self, p: float) -> int:
        return 1 if self.uniform() < p else 0

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        # Inversion: one draw per variate except for the (2**-53 likely) u == 0 redraw.
        u = self.uniform()
        while u == 0.0:
            u = self.uniform()
        return mean + sd * _STD_NORMAL.inv_cdf(u)


def derive_stream(seed: int, index: int) -> Xoshiro256:
    """Independent stream for unit ``index`` of a run seeded with ``seed``."""
    return Xoshiro256((seed & MASK64) ^ splitmix64_once(index))
