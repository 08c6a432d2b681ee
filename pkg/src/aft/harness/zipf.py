"""Zipf-distributed integers by rejection-inversion sampling.

Follows Hörmann and Derflinger's method as used by Apache Commons RNG: draw
from the integral of a continuous hat function, round, and accept with a
cheap squeeze test that almost always passes. Works for any exponent >= 0
and needs no table, so large keyspaces and steep skews are both cheap.
"""

from __future__ import annotations

import math
import random


def _log1p_over_x(x: float) -> float:
    return math.log1p(x) / x if abs(x) > 1e-8 else 1.0 - x * (0.5 - x * (1.0 / 3.0 - 0.25 * x))


def _expm1_over_x(x: float) -> float:
    return math.expm1(x) / x if abs(x) > 1e-8 else 1.0 + x * 0.5 * (1.0 + x * (1.0 / 3.0) * (1.0 + 0.25 * x))


class ZipfSampler:
    """Samples ranks 1..n with P(k) proportional to k**-exponent."""

    def __init__(self, n: int, exponent: float, rng: random.Random | None = None):
        if n < 1:
            raise ValueError("n must be positive")
        if exponent < 0:
            raise ValueError("exponent must be non-negative")
        self.n = n
        self.exponent = exponent
        self.rng = rng or random.Random()
        self._hx1 = self._h_integral(1.5) - 1.0
        self._hn = self._h_integral(n + 0.5)
        self._squeeze = 2.0 - self._h_integral_inverse(self._h_integral(2.5) - self._h(2.0))

    def _h(self, x: float) -> float:
        return math.exp(-self.exponent * math.log(x))

    def _h_integral(self, x: float) -> float:
        lx = math.log(x)
        return _expm1_over_x((1.0 - self.exponent) * lx) * lx

    def _h_integral_inverse(self, x: float) -> float:
        t = max(x * (1.0 - self.exponent), -1.0)
        return math.exp(_log1p_over_x(t) * x)

    def sample(self) -> int:
        while True:
            u = self._hn + self.rng.random() * (self._hx1 - self._hn)
            x = self._h_integral_inverse(u)
            k = min(max(int(x + 0.5), 1), self.n)
            if k - x <= self._squeeze or u >= self._h_integral(k + 0.5) - self._h(k):
                return k


def zipf_pmf(n: int, exponent: float) -> list[float]:
    """Exact probabilities of ranks 1..n."""
    weights = [k ** -exponent for k in range(1, n + 1)]
    total = math.fsum(weights)
    return [w / total for w in weights]
