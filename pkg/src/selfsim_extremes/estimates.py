"""Monte-Carlo point estimates with standard errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_samples: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean - 1.96 * self.stderr, self.mean + 1.96 * self.stderr)

    @classmethod
    def from_samples(cls, x) -> "MCEstimate":
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        if n == 0:
            return cls(math.nan, math.nan, 0)
        se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(x.mean()), se, n)

    @classmethod
    def from_sums(cls, n: int, s: float, ss: float) -> "MCEstimate":
        """From the count, sum and sum of squares of the samples."""
        if n == 0:
            return cls(math.nan, math.nan, 0)
        mean = s / n
        var = max(ss - n * mean * mean, 0.0) / (n - 1) if n > 1 else 0.0
        return cls(float(mean), float(math.sqrt(var / n)), int(n))

    @classmethod
    def from_count(cls, hits: int, n: int) -> "MCEstimate":
        """Binomial proportion."""
        p = hits / n
        return cls(float(p), float(math.sqrt(p * (1 - p) / n)), int(n))


def ratio_with_error(num: float, num_se: float, den: float, den_se: float = 0.0,
                     cov: float = 0.0) -> tuple[float, float]:
    """num/den with first-order (delta method) error propagation."""
    if den == 0:
        return math.nan, math.nan
    r = num / den
    var = (num_se ** 2 - 2 * r * cov + r * r * den_se ** 2) / (den * den)
    return r, math.sqrt(max(var, 0.0))
