"""Path functionals: grid supremum, sojourn time above a level, horizon
rescaling and the excess integral of normalized sojourns."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeError, UndefinedRatioError


@dataclass(frozen=True)
class SojournSample:
    L: float
    u: float
    r: int
    q: float

    @property
    def normalized(self) -> float:
        return self.L / self.q


def path_sup(path, axis: int = -1):
    """Largest grid value; biased low against the continuous supremum."""
    p = np.asarray(path, dtype=float)
    if p.size == 0 or p.shape[axis] == 0:
        raise ShapeError("supremum of an empty path")
    return p.max(axis=axis)


def _cells(times: np.ndarray, s: float) -> np.ndarray:
    """Cell lengths for the right-endpoint rule on (t_0, s].

    The first grid point opens the grid, so its cell is empty; cells past s
    are clipped to zero.
    """
    t = np.asarray(times, dtype=float)
    left = np.concatenate(([t[0]], t[:-1]))
    right = np.minimum(t, s)
    return np.clip(right - left, 0.0, None)


def sojourn_times(values, times, u: float, s: float = 1.0) -> np.ndarray:
    """Occupation time above ``u`` on (0, s] for each row of ``values``.

    Each grid cell (t_{j-1}, t_j] contributes its length when the path exceeds
    ``u`` at the right endpoint t_j.
    """
    if not 0.0 < s <= 1.0:
        raise InvalidParameterError(f"s must lie in (0, 1], got {s}")
    v = np.atleast_2d(np.asarray(values, dtype=float))
    cells = _cells(times, s)
    if v.shape[-1] != cells.size:
        raise ShapeError("path length does not match the grid")
    return (v > u) @ cells


def sojourn(path, times, u: float, s: float = 1.0, r: int = 1, q: float = 1.0) -> SojournSample:
    L = float(sojourn_times(path, times, u, s)[0])
    return SojournSample(L, float(u), int(r), float(q))


def sup_sojourn_mismatch(values, times, u: float) -> int:
    """Rows whose grid supremum exceeds ``u`` while no right endpoint does.

    With the first point opening the grid, this counts paths that exceed only
    at t_0: a grid-quality metric for coarse grids.
    """
    v = np.atleast_2d(np.asarray(values, dtype=float))
    return int(np.count_nonzero((v.max(axis=-1) > u) & (sojourn_times(v, times, u) == 0)))


def horizon_rescale(u, T: float, kappa: float):
    """Level on [0, 1] equivalent to ``u`` on [0, T] by self-similarity."""
    if not T > 0:
        raise InvalidParameterError(f"horizon T must be positive, got {T}")
    return np.asarray(u, dtype=float) * T ** (-kappa) if np.ndim(u) else float(u) * T ** (-kappa)


@dataclass(frozen=True)
class RatioEstimate:
    value: float
    stderr: float
    n: int


def excess_integral(samples, x: float) -> RatioEstimate:
    """mean((Y - x)^+) / mean(Y), the normalized integral of P(Y > y) over y > x.

    The standard error comes from the delta method applied to the ratio of
    two sample means.
    """
    if x < 0:
        raise InvalidParameterError(f"x must be >= 0, got {x}")
    y = np.asarray(samples, dtype=float).ravel()
    n = y.size
    if n == 0 or not np.any(y > 0):
        raise UndefinedRatioError("all normalized sojourn samples are zero")
    a = np.clip(y - x, 0.0, None)
    ma, mb = a.mean(), y.mean()
    ratio = ma / mb
    if n < 2:
        return RatioEstimate(float(ratio), math.nan, n)
    va, vb = a.var(ddof=1), y.var(ddof=1)
    cab = np.cov(a, y, ddof=1)[0, 1]
    var = (va - 2 * ratio * cab + ratio * ratio * vb) / (n * mb * mb)
    return RatioEstimate(float(ratio), float(math.sqrt(max(var, 0.0))), n)


def excess_integral_moments(sums: dict, x: float) -> RatioEstimate:
    """``excess_integral`` from accumulated sums, for batched reductions.

    ``sums`` holds n, sum_y, sum_yy and per-x entries a, aa, ay.
    """
    n = sums["n"]
    if n == 0 or sums["sum_y"] <= 0:
        raise UndefinedRatioError("all normalized sojourn samples are zero")
    mb = sums["sum_y"] / n
    ma = sums["a"][x] / n
    ratio = ma / mb
    if n < 2:
        return RatioEstimate(ratio, math.nan, n)
    va = (sums["aa"][x] - n * ma * ma) / (n - 1)
    vb = (sums["sum_yy"] - n * mb * mb) / (n - 1)
    cab = (sums["ay"][x] - n * ma * mb) / (n - 1)
    var = (va - 2 * ratio * cab + ratio * ratio * vb) / (n * mb * mb)
    return RatioEstimate(float(ratio), float(math.sqrt(max(var, 0.0))), n)
