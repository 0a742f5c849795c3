"""Exact Gaussian path simulation on time grids, skew-Gaussian assembly and
order-statistic paths.

Two exact samplers are provided. Cholesky works on any grid. On log-uniform
grids the process is simulated on the Lamperti side, where it is stationary
and its covariance matrix is Toeplitz, by circulant embedding and FFT, then
mapped back with X(t) = t^kappa * Y(log t).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy import stats

from .errors import (
    InvalidParameterError,
    NumericalDegeneracyError,
    ShapeError,
    UnsupportedOperationError,
)
from .kernels import (
    JITTER_LADDER,
    CovarianceKernel,
    StationaryKernel,
    gaussian_marginal,
    lamperti_kernel,
    skew_marginal,
)
from .streams import as_generator

LAYOUTS = ("uniform", "log-uniform", "custom", "lamperti")
DEFAULT_T_MIN = 1e-3
EMBEDDING_NEG_TOL = -1e-9
EMBEDDING_PADS = (1, 2, 4)
_CHUNK = 128


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridSpec:
    """Strictly increasing sample times in (0, 1].

    The ``lamperti`` layout holds equispaced log-times s <= 0 instead.
    """

    times: np.ndarray
    layout: str = "custom"

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        if self.layout not in LAYOUTS:
            raise InvalidParameterError(f"unknown grid layout {self.layout!r}")
        if t.ndim != 1 or t.size < 1:
            raise InvalidParameterError("grid must be a non-empty 1-d sequence")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise InvalidParameterError("grid times must be strictly increasing")
        if self.layout == "lamperti":
            if t[-1] > 1e-12:
                raise InvalidParameterError("Lamperti grid holds log-times <= 0")
        elif not (t[0] > 0 and t[-1] <= 1.0 + 1e-12):
            raise InvalidParameterError("grid times must lie in (0, 1]")

    @property
    def N(self) -> int:
        return int(self.times.size)

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    def cell_lengths(self) -> np.ndarray:
        """Lengths of the cells (t_{j-1}, t_j]; the first point opens the grid."""
        d = np.diff(self.times, prepend=self.times[0])
        return d

    def key(self) -> tuple:
        return (self.layout, self.times.tobytes())

    def __eq__(self, other):
        return isinstance(other, GridSpec) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def step_near_one(self) -> float:
        return float(self.times[-1] - self.times[-2]) if self.N > 1 else math.nan


def make_grid(layout: str, N: int, t_min: float = DEFAULT_T_MIN) -> GridSpec:
    """``uniform``: 1/N, 2/N, ..., 1. ``log-uniform``: geometric from t_min to 1."""
    if int(N) != N or N < 2:
        raise InvalidParameterError(f"grid needs N >= 2 points, got {N}")
    N = int(N)
    if layout == "uniform":
        return GridSpec(np.arange(1, N + 1) / N, "uniform")
    if layout == "log-uniform":
        if not 0.0 < t_min < 1.0:
            raise InvalidParameterError(f"t_min must lie in (0, 1), got {t_min}")
        s = np.linspace(math.log(t_min), 0.0, N)
        t = np.exp(s)
        t[-1] = 1.0
        return GridSpec(t, "log-uniform")
    raise InvalidParameterError(f"unknown grid layout {layout!r}")


def grid_for_level(q_value: float, t_min: float = DEFAULT_T_MIN,
                   cells_per_q: float = 8.0) -> GridSpec:
    """Log-uniform grid whose step near t = 1 is at most q / cells_per_q."""
    step = q_value / cells_per_q
    N = int(math.ceil(-math.log(t_min) / step)) + 1
    return make_grid("log-uniform", max(N, 2), t_min)


def lamperti_grid(grid: GridSpec) -> GridSpec:
    if grid.layout != "log-uniform":
        raise InvalidParameterError("Lamperti simulation needs a log-uniform grid")
    s = np.log(grid.times)
    s[-1] = 0.0
    return GridSpec(s, "lamperti")


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """``values[i, j]`` is path i at ``grid.times[j]``."""

    grid: GridSpec
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != self.grid.N:
            raise ShapeError(f"values of shape {v.shape} do not match a grid of {self.grid.N}")
        if not np.all(np.isfinite(v)):
            raise NumericalDegeneracyError("ensemble contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return int(self.values.shape[0])

    def to_text(self) -> str:
        """One comma-separated row per path; first row holds the grid."""
        rows = [",".join(repr(float(x)) for x in self.grid.times)]
        rows += [",".join(repr(float(x)) for x in row) for row in self.values]
        return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# Cholesky sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CholeskyPlan:
    grid: GridSpec
    factor: np.ndarray
    jitter: float


def _times_of(grid) -> np.ndarray:
    return grid.times if isinstance(grid, GridSpec) else np.atleast_1d(np.asarray(grid, float))


def cholesky_with_jitter(gram: np.ndarray, what: str = "grid") -> tuple[np.ndarray, float]:
    scale = float(np.max(np.abs(np.diag(gram)))) or 1.0
    for jit in JITTER_LADDER:
        try:
            L = np.linalg.cholesky(gram + jit * scale * np.eye(gram.shape[0]))
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, jit * scale
    raise NumericalDegeneracyError(
        f"Cholesky factorisation failed after jitter {JITTER_LADDER[-1]:g} on {what}")


def plan_cholesky(kernel: CovarianceKernel, grid) -> CholeskyPlan:
    """Factor the Gram matrix of ``kernel`` on ``grid`` (GridSpec or raw times)."""
    times = _times_of(grid)
    srt = np.sort(times)
    if srt.size > 1 and np.any(np.diff(srt) == 0):
        raise NumericalDegeneracyError(
            f"singular Gram matrix: duplicated time points in grid {times.tolist()[:8]}...")
    what = f"grid of {times.size} points in [{times.min():.4g}, {times.max():.4g}]"
    L, jit = cholesky_with_jitter(kernel.gram(times), what)
    g = grid if isinstance(grid, GridSpec) else GridSpec(times, "custom")
    L.setflags(write=False)
    return CholeskyPlan(g, L, jit)


def _normals(rng, shape):
    return rng.standard_normal(shape)


def sample_paths(plan: CholeskyPlan, n: int, rng) -> PathEnsemble:
    """``n`` independent paths, each ``factor @ z`` for standard normal ``z``."""
    if n < 0:
        raise InvalidParameterError(f"path count must be >= 0, got {n}")
    rng = as_generator(rng)
    N = plan.grid.N
    out = np.empty((n, N))
    for lo in range(0, n, 4 * _CHUNK):
        hi = min(n, lo + 4 * _CHUNK)
        out[lo:hi] = _normals(rng, (hi - lo, N)) @ plan.factor.T
    return PathEnsemble(plan.grid, out, {"method": "cholesky", "jitter": plan.jitter})


# ---------------------------------------------------------------------------
# Circulant embedding
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CirculantPlan:
    grid: GridSpec
    sqrt_eig: np.ndarray | None    # None means the embedding failed
    size: int
    pad: int
    min_eigenvalue: float


def plan_circulant(stationary: StationaryKernel, grid: GridSpec) -> CirculantPlan:
    """Embed the Toeplitz covariance of an equispaced grid into a circulant
    matrix of power-of-two size, enlarging the embedding up to 4x when the
    minimal one has eigenvalues below -1e-9."""
    if grid.layout != "lamperti":
        raise InvalidParameterError("circulant embedding needs an equispaced Lamperti grid")
    N = grid.N
    step = float(grid.times[1] - grid.times[0]) if N > 1 else 1.0
    worst = -math.inf
    for pad in EMBEDDING_PADS:
        M = 1 << max(1, int(math.ceil(math.log2(max(2 * (N - 1) * pad, 2)))))
        k = np.arange(M)
        lags = np.minimum(k, M - k) * step
        row = stationary(lags)
        lam = scipy.fft.fft(row).real
        worst = float(lam.min())
        if worst >= EMBEDDING_NEG_TOL:
            sq = np.sqrt(np.clip(lam, 0.0, None) / M)
            sq.setflags(write=False)
            return CirculantPlan(grid, sq, M, pad, worst)
    return CirculantPlan(grid, None, 0, 0, worst)


def _circulant_draw(plan: CirculantPlan, count: int, rng) -> np.ndarray:
    N, M = plan.grid.N, plan.size
    out = np.empty((count, N))
    pairs = (count + 1) // 2
    row = 0
    for lo in range(0, pairs, _CHUNK):
        hi = min(pairs, lo + _CHUNK)
        z = _normals(rng, (hi - lo, 2, M))
        w = (z[:, 0] + 1j * z[:, 1]) * plan.sqrt_eig
        y = scipy.fft.fft(w, axis=-1)[:, :N]
        both = np.empty((2 * (hi - lo), N))
        both[0::2] = y.real
        both[1::2] = y.imag
        take = min(both.shape[0], count - row)
        out[row:row + take] = both[:take]
        row += take
    return out


def circulant_sample(stationary: StationaryKernel, grid: GridSpec, count: int,
                     rng, plan: CirculantPlan | None = None) -> PathEnsemble:
    """Stationary Gaussian sequences on an equispaced log-time grid.

    When no embedding up to 4x is non-negative the Toeplitz matrix is factored
    by Cholesky instead and the fallback is recorded in ``provenance``.
    """
    if count < 0:
        raise InvalidParameterError(f"count must be >= 0, got {count}")
    rng = as_generator(rng)
    if plan is None:
        plan = plan_circulant(stationary, grid)
    if plan.sqrt_eig is not None:
        vals = _circulant_draw(plan, count, rng)
        prov = {"method": "circulant", "embedding": plan.size, "pad": plan.pad,
                "min_eigenvalue": plan.min_eigenvalue}
    else:
        lags = np.abs(grid.times[:, None] - grid.times[None, :])
        L, jit = cholesky_with_jitter(stationary(lags), "Lamperti grid")
        vals = np.empty((count, grid.N))
        for lo in range(0, count, 4 * _CHUNK):
            hi = min(count, lo + 4 * _CHUNK)
            vals[lo:hi] = _normals(rng, (hi - lo, grid.N)) @ L.T
        prov = {"method": "cholesky-fallback", "jitter": jit,
                "min_eigenvalue": plan.min_eigenvalue}
    return PathEnsemble(grid, vals, prov)


def lamperti_to_unit_interval(stationary_paths: PathEnsemble, kappa: float) -> PathEnsemble:
    """Map Y(s) on log-times s <= 0 to X(t) = t^kappa Y(log t) on (0, 1]."""
    s = stationary_paths.grid.times
    if np.any(s > 1e-12):
        raise InvalidParameterError("log-times must be <= 0")
    t = np.exp(s)
    t[-1] = min(t[-1], 1.0)
    vals = stationary_paths.values * np.exp(kappa * s)[None, :]
    layout = "log-uniform" if stationary_paths.grid.layout == "lamperti" else "custom"
    prov = dict(stationary_paths.provenance, lamperti_kappa=kappa)
    return PathEnsemble(GridSpec(t, layout), vals, prov)


# ---------------------------------------------------------------------------
# Dispatch used by higher layers
# ---------------------------------------------------------------------------

_PLAN_CACHE: dict = {}


def _cached(key, build):
    if key not in _PLAN_CACHE:
        if len(_PLAN_CACHE) > 32:
            _PLAN_CACHE.clear()
        _PLAN_CACHE[key] = build()
    return _PLAN_CACHE[key]


def simulate_gaussian(kernel: CovarianceKernel, grid: GridSpec, count: int, rng) -> np.ndarray:
    """Raw ``(count, N)`` array of exact Gaussian paths on ``grid``.

    Log-uniform grids go through the Lamperti side and circulant embedding;
    any other grid uses a cached Cholesky factor.
    """
    rng = as_generator(rng)
    if grid.layout == "log-uniform" and grid.N > 2:
        lg = lamperti_grid(grid)
        plan = _cached(("circ", kernel, lg.key()),
                       lambda: plan_circulant(lamperti_kernel(kernel), lg))
        ens = circulant_sample(StationaryKernel(kernel), lg, count, rng, plan=plan)
        return ens.values * (grid.times ** kernel.kappa)[None, :]
    plan = _cached(("chol", kernel, grid.key()), lambda: plan_cholesky(kernel, grid))
    return sample_paths(plan, count, rng).values


# ---------------------------------------------------------------------------
# Skew-Gaussian paths and order statistics
# ---------------------------------------------------------------------------

def _skew_combine(components, delta: float) -> np.ndarray:
    m = len(components) - 1
    chi = np.sqrt(sum(c * c for c in components[:m])) if m else 0.0
    return delta * chi + math.sqrt(max(0.0, 1.0 - delta * delta)) * components[m]


def sample_skew(component_ensembles, delta: float) -> PathEnsemble:
    """zeta = delta * |chi| + sqrt(1 - delta^2) * X_{m+1} from m + 1 ensembles."""
    comps = list(component_ensembles)
    if len(comps) < 2:
        raise InvalidParameterError("need m + 1 >= 2 component ensembles")
    if not 0.0 <= delta <= 1.0:
        raise InvalidParameterError(f"delta must lie in [0, 1], got {delta}")
    g0 = comps[0].grid
    for c in comps[1:]:
        if c.grid != g0 or c.values.shape != comps[0].values.shape:
            raise ShapeError("component ensembles must share grid and row count")
    vals = _skew_combine([c.values for c in comps], delta)
    return PathEnsemble(g0, vals, {"method": "skew", "delta": delta, "m": len(comps) - 1})


def order_statistic(values, r: int, axis: int = -2) -> np.ndarray:
    """r-th largest along ``axis`` (r = 1 is the maximum)."""
    v = np.asarray(values)
    n = v.shape[axis]
    if int(r) != r or not 1 <= r <= n:
        raise InvalidParameterError(f"order index r must satisfy 1 <= r <= {n}, got {r}")
    k = n - int(r)
    return np.take(np.partition(v, k, axis=axis), k, axis=axis)


def order_statistic_path(ensemble: PathEnsemble, r: int) -> np.ndarray:
    return order_statistic(ensemble.values, r, axis=0)


# ---------------------------------------------------------------------------
# Process model: Gaussian or skew-Gaussian built from one kernel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProcessModel:
    """zeta built from m + 1 independent copies of a standardized Gaussian
    kernel; ``delta = 0`` is the Gaussian process itself."""

    kernel: CovarianceKernel
    delta: float = 0.0
    m: int = 1

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise InvalidParameterError(f"delta must lie in [0, 1], got {self.delta}")
        if int(self.m) != self.m or self.m < 1:
            raise InvalidParameterError(f"m must be a positive integer, got {self.m}")
        object.__setattr__(self, "kernel", self.kernel.standardized())

    @property
    def kappa(self) -> float:
        return self.kernel.kappa

    @property
    def gaussian(self) -> bool:
        return self.delta == 0.0 and self.kernel.gaussian

    @property
    def components(self) -> int:
        return 1 if self.delta == 0.0 else self.m + 1

    def marginal(self):
        return gaussian_marginal() if self.delta == 0.0 else skew_marginal(self.delta, self.m)

    def sample(self, grid: GridSpec, count: int, rng) -> np.ndarray:
        rng = as_generator(rng)
        if self.delta == 0.0:
            return simulate_gaussian(self.kernel, grid, count, rng)
        comps = simulate_gaussian(self.kernel, grid, count * (self.m + 1), rng)
        comps = comps.reshape(count, self.m + 1, grid.N)
        return _skew_combine([comps[:, i] for i in range(self.m + 1)], self.delta)

    def label(self) -> str:
        if self.delta == 0.0:
            return self.kernel.label()
        return f"skew[{self.kernel.label()}, delta={self.delta:g}, m={self.m}]"


# ---------------------------------------------------------------------------
# Conditional sampling given an exceedance
# ---------------------------------------------------------------------------

CONDITIONAL_MIN_LEVEL = -8.0
SKEW_REJECTION_FLOOR = 1e-5


def truncated_normal_above(a, size, rng) -> np.ndarray:
    """Standard normal conditioned on exceeding ``a`` (inverse-survival method)."""
    u = 1.0 - rng.random(size)
    return stats.norm.isf(u * stats.norm.sf(a))


def condition_paths(kernel: CovarianceKernel, times: np.ndarray, paths: np.ndarray,
                    index, u: float, rng) -> np.ndarray:
    """Turn unconditional Gaussian paths into paths conditioned on
    X(times[index]) > u.

    The conditioning value V is drawn from the truncated normal law, then each
    path is corrected by kriging: X = Z + Cov(., t_j)/Var(t_j) * (V - Z(t_j)),
    which has exactly the Gaussian conditional law given X(t_j) = V.
    ``index`` may be a scalar or one index per path.
    """
    count = paths.shape[0]
    idx = np.broadcast_to(np.asarray(index), (count,))
    tj = times[idx]
    var_j = kernel.evaluate(tj, tj)
    sd_j = np.sqrt(var_j)
    v = sd_j * truncated_normal_above(u / sd_j, count, rng)
    cov = kernel.evaluate(times[None, :], tj[:, None])
    z_j = paths[np.arange(count), idx]
    return paths + cov * ((v - z_j) / var_j)[:, None]


def conditional_tail_ensemble(kernel: CovarianceKernel, grid: GridSpec, u: float,
                              count: int, rng) -> PathEnsemble:
    """Gaussian paths on ``grid`` distributed as X given X(1) > u."""
    if not kernel.gaussian:
        raise UnsupportedOperationError("exact conditional sampling needs a Gaussian kernel")
    if u < CONDITIONAL_MIN_LEVEL:
        raise UnsupportedOperationError(f"conditioning level {u} below {CONDITIONAL_MIN_LEVEL}")
    if abs(grid.times[-1] - 1.0) > 1e-12:
        raise InvalidParameterError("t = 1 must be the last grid point")
    rng = as_generator(rng)
    z = simulate_gaussian(kernel, grid, count, rng)
    x = condition_paths(kernel, grid.times, z, grid.N - 1, u, rng)
    return PathEnsemble(grid, x, {"method": "conditional", "level": u})


def conditional_tail_skew(model: ProcessModel, grid: GridSpec, u: float, count: int,
                          rng, max_rounds: int = 10_000) -> PathEnsemble:
    """zeta given zeta(1) > u by rejection; refused when P(zeta(1) > u) < 1e-5."""
    if abs(grid.times[-1] - 1.0) > 1e-12:
        raise InvalidParameterError("t = 1 must be the last grid point")
    p = float(model.marginal().tail(u))
    if p < SKEW_REJECTION_FLOOR:
        raise UnsupportedOperationError(
            f"rejection sampling infeasible: P(zeta(1) > {u}) = {p:.3g} < {SKEW_REJECTION_FLOOR:g}")
    rng = as_generator(rng)
    batch = int(min(1_000_000, max(1000, 2 * count / p)))
    kept, have = [], 0
    for _ in range(max_rounds):
        if have >= count:
            break
        z = model.sample(grid, batch, rng)
        z = z[z[:, -1] > u]
        kept.append(z)
        have += z.shape[0]
    vals = np.concatenate(kept)[:count] if kept else np.empty((0, grid.N))
    return PathEnsemble(grid, vals, {"method": "rejection", "level": u})
