"""Monte-Carlo experiment engine.

An experiment simulates batches of n-copy ensembles, forms the r-th order
statistic path and evaluates grid functionals at every requested level. Each
batch draws from its own counter-based stream keyed by (seed, batch index),
and batch results are folded in batch order, so output does not depend on
how batches are scheduled over workers.

Three estimators are available:

``ensemble``
    plain Monte Carlo over independent ensembles.
``pooled``
    for n = 2, every pair of paths inside a batch forms an ensemble; the
    U-statistic over pairs replaces the average over disjoint pairs.
``size-biased``
    Gaussian processes only. A grid point t_j is drawn with probability
    proportional to (cell length) * P(X_{r:n}(t_j) > u), the copies are
    conditioned exactly on the order statistic exceeding u there, and the
    sojourn L of the resulting ensemble is recorded. Under this law
    P(L > 0) = E[L] * E[1/L] and the excess-integral ratio is E[(1 - x/Y)^+],
    with E[L] known in closed form on the grid.
"""
from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import special, stats

from .asymptotics import (
    ThetaEstimate,
    binomial_upper,
    order_tail_asymptotic,
    order_tail_exact,
    p_prediction_thm3,
    p_prediction_thm4,
)
from .errors import (
    ConfigError,
    InvalidParameterError,
    ResourceError,
    UndefinedRatioError,
)
from .estimates import MCEstimate, ratio_with_error
from .functionals import (
    RatioEstimate,
    _cells,
    excess_integral_moments,
    horizon_rescale,
    sojourn_times,
)
from .kernels import (
    KERNEL_FACTORIES,
    LocalExpansion,
    known_expansion,
    local_expansion,
    make_kernel,
    scaling_scheme_for,
)
from .pathsim import (
    GridSpec,
    ProcessModel,
    condition_paths,
    make_grid,
    order_statistic,
    simulate_gaussian,
)
from .streams import stream

FUNCTIONALS = ("sup-probability", "sojourn", "prop2-integral")
ESTIMATORS = ("ensemble", "pooled", "size-biased")
DEFAULT_LEVELS = (2.0, 2.5, 3.0, 3.5, 4.0)
DEFAULT_MEMORY_LIMIT = 2e9
CSV_COLUMNS = ("u", "estimate", "stderr", "prediction", "ratio", "ratio_err",
               "n_samples", "grid_N", "seed")


@dataclass(frozen=True)
class ExperimentSpec:
    kernel: str = "fbm"
    kernel_params: tuple = (("H", 0.5),)
    delta: float = 0.0
    m: int = 1
    n: int = 1
    r: int = 1
    levels: tuple = DEFAULT_LEVELS
    grid_layout: str = "log-uniform"
    grid_N: int = 4096
    t_min: float = 1e-3
    T: float = 1.0
    functional: str = "sup-probability"
    batches: int = 16
    batch_size: int = 4096
    seed: int = 0
    estimator: str = "ensemble"
    x_grid: tuple = ()
    memory_limit: float = DEFAULT_MEMORY_LIMIT

    def __post_init__(self):
        object.__setattr__(self, "kernel_params", tuple(sorted(dict(self.kernel_params).items())))
        object.__setattr__(self, "levels", tuple(sorted(float(u) for u in self.levels)))
        object.__setattr__(self, "x_grid", tuple(float(x) for x in self.x_grid))
        if self.kernel not in KERNEL_FACTORIES:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.functional not in FUNCTIONALS:
            raise ConfigError(f"unknown functional {self.functional!r}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if int(self.n) != self.n or int(self.r) != self.r or not 1 <= self.r <= self.n:
            raise ConfigError(f"need integers 1 <= r <= n, got n={self.n}, r={self.r}")
        if self.batches < 0 or self.batch_size < 1:
            raise ConfigError("MC budget needs batches >= 0 and batch_size >= 1")
        if not self.levels:
            raise ConfigError("level grid is empty")
        if not self.T > 0:
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        if self.estimator == "pooled" and self.n != 2:
            raise ConfigError("the pooled estimator is implemented for n = 2")
        if self.functional == "prop2-integral" and not self.x_grid:
            raise ConfigError("prop2-integral needs an x grid")
        if self.estimator == "size-biased" and self.delta != 0.0:
            raise ConfigError("the size-biased estimator needs a Gaussian process (delta = 0)")

    @property
    def budget(self) -> int:
        return self.batches * self.batch_size

    def model(self) -> ProcessModel:
        return _model(self.kernel, self.kernel_params, self.delta, self.m)

    def grid(self) -> GridSpec:
        return make_grid(self.grid_layout, self.grid_N, self.t_min)

    def expansion(self) -> LocalExpansion:
        return _expansion(self.kernel, self.kernel_params)

    def scheme(self):
        e = self.expansion()
        return scaling_scheme_for(e.alpha, self.model().kappa)

    def unit_levels(self) -> tuple:
        """Levels on [0, 1] equivalent to ``levels`` on [0, T]."""
        return tuple(float(horizon_rescale(u, self.T, self.model().kappa)) for u in self.levels)


@lru_cache(maxsize=64)
def _model(name, params, delta, m) -> ProcessModel:
    return ProcessModel(make_kernel(name, **dict(params)), delta, m)


@lru_cache(maxsize=64)
def _expansion(name, params) -> LocalExpansion:
    kern = make_kernel(name, **dict(params))
    return known_expansion(kern) or local_expansion(kern)


def check_memory(spec: ExperimentSpec) -> int:
    """Bytes one batch needs; raises before any simulation if over the limit."""
    copies = spec.n * (spec.m + 1 if spec.delta > 0 else 1)
    need = int(spec.batch_size * copies * spec.grid_N * 8 * 4)
    if need > spec.memory_limit:
        raise ResourceError(
            f"one batch needs about {need / 1e9:.2f} GB "
            f"({spec.batch_size} ensembles x {copies} paths x {spec.grid_N} points); "
            f"limit {spec.memory_limit / 1e9:.2f} GB")
    return need


# ---------------------------------------------------------------------------
# Batch kernels
# ---------------------------------------------------------------------------

def _level_record(x_grid):
    return {"hits": 0, "s": 0.0, "ss": 0.0, "mismatch": 0,
            "n": 0, "sum_y": 0.0, "sum_yy": 0.0,
            "a": dict.fromkeys(x_grid, 0.0), "aa": dict.fromkeys(x_grid, 0.0),
            "ay": dict.fromkeys(x_grid, 0.0)}


def _ensemble_batch(spec: ExperimentSpec, b: int) -> list:
    model = spec.model()
    grid = spec.grid()
    rng = stream(spec.seed, b, "ensemble")
    vals = model.sample(grid, spec.batch_size * spec.n, rng)
    path = order_statistic(vals.reshape(spec.batch_size, spec.n, grid.N), spec.r, axis=1)
    del vals
    sup = path.max(axis=1)
    scheme = spec.scheme() if spec.functional == "prop2-integral" else None
    out = []
    for u in spec.unit_levels():
        rec = _level_record(spec.x_grid)
        L = sojourn_times(path, grid.times, u)
        rec["hits"] = int(np.count_nonzero(sup > u))
        rec["s"], rec["ss"] = float(L.sum()), float((L * L).sum())
        rec["mismatch"] = int(np.count_nonzero((sup > u) & (L == 0)))
        rec["n"] = spec.batch_size
        if scheme is not None:
            y = L / float(scheme.q(u))
            rec["sum_y"], rec["sum_yy"] = float(y.sum()), float((y * y).sum())
            for x in spec.x_grid:
                a = np.clip(y - x, 0.0, None)
                rec["a"][x], rec["aa"][x] = float(a.sum()), float((a * a).sum())
                rec["ay"][x] = float((a * y).sum())
        out.append(rec)
    return out


def _pooled_batch(spec: ExperimentSpec, b: int) -> list:
    """U-statistic over all pairs of paths in the batch (n = 2)."""
    model = spec.model()
    grid = spec.grid()
    rng = stream(spec.seed, b, "pooled")
    m = spec.batch_size
    vals = model.sample(grid, m, rng)
    sup = vals.max(axis=1)
    pairs = m * (m - 1) / 2
    out = []
    for u in spec.unit_levels():
        rec = _level_record(spec.x_grid)
        idx = np.flatnonzero(sup > u)
        hits = 0
        if spec.r == 1:
            # max of a pair exceeds iff either path does
            k = idx.size
            hits = k * (m - k) + k * (k - 1) // 2
        elif idx.size > 1:
            sub = vals[idx] > u
            # pair (i, j) hits when both paths exceed at a common grid time
            co = sub.astype(np.int32) @ sub.T.astype(np.int32)
            hits = int(np.count_nonzero(np.triu(co, 1)))
        rec["hits"] = int(hits)
        rec["n"] = 1
        rec["s"] = hits / pairs
        rec["ss"] = (hits / pairs) ** 2
        out.append(rec)
    return out


@dataclass(frozen=True)
class _SizeBiasLaw:
    cells: np.ndarray
    weights: np.ndarray       # cells * G_r at each grid point
    mean_L: float
    marg_tail: np.ndarray     # P(X(t_j) > u) for one copy
    sd: np.ndarray


def size_biased_law(spec: ExperimentSpec, u: float) -> _SizeBiasLaw:
    grid = spec.grid()
    kern = spec.model().kernel
    sd = np.sqrt(kern.evaluate(grid.times, grid.times))
    g = stats.norm.sf(u / sd)
    cells = _cells(grid.times, 1.0)
    G = np.asarray(binomial_upper(g, spec.n, spec.r))
    w = cells * G
    return _SizeBiasLaw(cells, w, float(w.sum()), g, sd)


def _size_biased_batch(spec: ExperimentSpec, b: int) -> list:
    model = spec.model()
    kern = model.kernel
    grid = spec.grid()
    n, r, m = spec.n, spec.r, spec.batch_size
    out = []
    for iu, u in enumerate(spec.unit_levels()):
        law = size_biased_law(spec, u)
        rng = stream(spec.seed, b, f"size-biased-{iu}")
        rec = _level_record(spec.x_grid)
        if law.mean_L <= 0:
            out.append(rec)
            continue
        cdf = np.cumsum(law.weights) / law.mean_L
        j = np.minimum(np.searchsorted(cdf, rng.random(m), side="right"), grid.N - 1)
        # number of exceeding copies, given at least r of n exceed at t_j
        g = law.marg_tail[j]
        ks = np.arange(r, n + 1)
        with np.errstate(divide="ignore"):
            logp = (special.gammaln(n + 1) - special.gammaln(ks + 1) - special.gammaln(n - ks + 1))[None, :] \
                + ks[None, :] * np.log(g)[:, None] + (n - ks)[None, :] * np.log1p(-g)[:, None]
        pk = np.exp(logp - logp.max(axis=1, keepdims=True))
        pk /= pk.sum(axis=1, keepdims=True)
        kk = r + (rng.random((m, 1)) > np.cumsum(pk, axis=1)).sum(axis=1)
        z = simulate_gaussian(kern, grid, m * n, rng)
        jj = np.repeat(j, n)
        above = (np.arange(n)[None, :] < kk[:, None]).ravel()
        x = np.empty_like(z)
        if np.any(above):
            x[above] = condition_paths(kern, grid.times, z[above], jj[above], u, rng)
        if np.any(~above):
            # below u: condition -X on exceeding -u
            x[~above] = -condition_paths(kern, grid.times, -z[~above], jj[~above], -u, rng)
        del z
        path = order_statistic(x.reshape(m, n, grid.N), r, axis=1)
        L = sojourn_times(path, grid.times, u)
        inv = law.mean_L / L
        rec["n"] = m
        rec["s"], rec["ss"] = float(inv.sum()), float((inv * inv).sum())
        rec["hits"] = m
        rec["mean_L"] = law.mean_L
        if spec.functional == "prop2-integral":
            y = L / float(spec.scheme().q(u))
            for xv in spec.x_grid:
                f = np.clip(1.0 - xv / y, 0.0, None)
                rec["a"][xv], rec["aa"][xv] = float(f.sum()), float((f * f).sum())
        out.append(rec)
    return out


_BATCH_FUNCS = {"ensemble": _ensemble_batch, "pooled": _pooled_batch,
                "size-biased": _size_biased_batch}


def _run_batch(args):
    spec, b = args
    return _BATCH_FUNCS[spec.estimator](spec, b)


def resolve_workers(workers=None) -> int:
    if workers is None:
        env = os.environ.get("ORDSTAT_WORKERS")
        workers = int(env) if env else 1
    if workers < 1:
        raise InvalidParameterError(f"worker count must be >= 1, got {workers}")
    return int(workers)


def _map_batches(spec: ExperimentSpec, workers: int):
    jobs = [(spec, b) for b in range(spec.batches)]
    if workers == 1 or spec.batches <= 1:
        return [_run_batch(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_batch, jobs))


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass
class LevelResult:
    u: float
    p: MCEstimate
    sojourn: MCEstimate
    prop2: dict = field(default_factory=dict)
    mismatches: int = 0


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    levels: list

    def estimate(self, u: float) -> MCEstimate:
        for lv in self.levels:
            if abs(lv.u - u) < 1e-12:
                return _primary(self.spec, lv)
        raise KeyError(u)

    def estimates(self) -> dict:
        return {lv.u: _primary(self.spec, lv) for lv in self.levels}


def _primary(spec, lv: LevelResult) -> MCEstimate:
    if spec.functional == "sojourn":
        return lv.sojourn
    if spec.functional == "prop2-integral":
        return lv.sojourn
    return lv.p


def _fold(spec: ExperimentSpec, batches: list) -> list:
    results = []
    for iu, u in enumerate(spec.levels):
        recs = [bat[iu] for bat in batches]
        if spec.estimator == "ensemble":
            n = sum(r["n"] for r in recs)
            hits = sum(r["hits"] for r in recs)
            p = MCEstimate.from_count(hits, n)
            s = sum(r["s"] for r in recs)
            ss = sum(r["ss"] for r in recs)
            soj = MCEstimate.from_sums(n, s, ss)
            mism = sum(r["mismatch"] for r in recs)
            prop2 = {}
            if spec.functional == "prop2-integral":
                sums = {"n": n, "sum_y": sum(r["sum_y"] for r in recs),
                        "sum_yy": sum(r["sum_yy"] for r in recs),
                        "a": {}, "aa": {}, "ay": {}}
                for x in spec.x_grid:
                    for k in ("a", "aa", "ay"):
                        sums[k][x] = sum(r[k][x] for r in recs)
                for x in spec.x_grid:
                    try:
                        prop2[x] = excess_integral_moments(sums, x)
                    except UndefinedRatioError:
                        prop2[x] = RatioEstimate(math.nan, math.nan, n)
            results.append(LevelResult(u, p, soj, prop2, mism))
        elif spec.estimator == "pooled":
            B = len(recs)
            s = sum(r["s"] for r in recs)
            ss = sum(r["ss"] for r in recs)
            p = MCEstimate.from_sums(B, s, ss)
            p = MCEstimate(p.mean, p.stderr, B * spec.batch_size)
            results.append(LevelResult(u, p, MCEstimate(math.nan, math.nan, 0)))
        else:
            n = sum(r["n"] for r in recs)
            mean_L = next((r["mean_L"] for r in recs if "mean_L" in r), 0.0)
            if n == 0 or mean_L == 0:
                results.append(LevelResult(u, MCEstimate(0.0, 0.0, n),
                                           MCEstimate(mean_L, 0.0, n)))
                continue
            p = MCEstimate.from_sums(n, sum(r["s"] for r in recs), sum(r["ss"] for r in recs))
            soj = MCEstimate(mean_L, 0.0, n)
            prop2 = {}
            if spec.functional == "prop2-integral":
                for x in spec.x_grid:
                    e = MCEstimate.from_sums(n, sum(r["a"][x] for r in recs),
                                             sum(r["aa"][x] for r in recs))
                    prop2[x] = RatioEstimate(e.mean, e.stderr, n)
            results.append(LevelResult(u, p, soj, prop2, 0))
    return results


def run_experiment(spec: ExperimentSpec, workers=None) -> ExperimentResult:
    """Run the experiment described by `spec` and return per-level estimates.

    ``p`` is the probability that the grid supremum of X_{r:n} exceeds u,
    ``sojourn`` the mean occupation time above u and ``prop2`` the excess
    integral of L/q(u) at each x. Levels refer to [0, T] and are mapped to
    [0, 1] by self-similarity.
    """
    if spec.budget <= 0:
        raise ResourceError("MC budget must be positive")
    check_memory(spec)
    batches = _map_batches(spec, resolve_workers(workers))
    return ExperimentResult(spec, _fold(spec, batches))


# ---------------------------------------------------------------------------
# Convergence tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRow:
    u: float
    estimate: MCEstimate
    prediction: float
    prediction_stderr: float
    ratio: float
    ratio_err: float
    n_samples: int
    grid_N: int
    seed: int
    applicable: bool = True


def convergence_table(spec: ExperimentSpec, source: str, theta_prime: float | None = None,
                      theta_prime_stderr: float = 0.0, workers=None,
                      result: ExperimentResult | None = None) -> list:
    """Rows of (MC estimate, prediction, estimate/prediction) over the levels.

    ``source`` is ``thm3`` (order-statistic tail), ``thm4`` (slope times mean
    normalized sojourn, needs ``theta_prime``) or ``prop1-tail`` (exact over
    leading-term binomial tail, no simulation).
    """
    if source not in ("thm3", "thm4", "prop1-tail"):
        raise ConfigError(f"unknown prediction source {source!r}")
    if source == "thm4" and theta_prime is None:
        raise ConfigError("thm4 predictions need -Theta'(0); run the theta command or set it")
    model = spec.model()
    marg = model.marginal()
    rows = []
    if source == "prop1-tail":
        for u, uu in zip(spec.levels, spec.unit_levels()):
            ex = float(order_tail_exact(uu, spec.n, spec.r, marg))
            asy = float(order_tail_asymptotic(uu, spec.n, spec.r, marg)[0])
            rows.append(ConvergenceRow(u, MCEstimate(ex, 0.0, 0), asy, 0.0,
                                       ex / asy if asy > 0 else math.nan, 0.0, 0,
                                       spec.grid_N, spec.seed))
        return rows
    if result is None:
        result = run_experiment(spec, workers)
    scheme = spec.scheme()
    for lv, uu in zip(result.levels, spec.unit_levels()):
        est = lv.p
        if source == "thm4":
            pred = p_prediction_thm4(uu, spec.n, spec.r, marg, model.kappa, scheme,
                                     theta_prime, theta_prime_stderr)
        else:
            pred = p_prediction_thm3(uu, spec.n, spec.r, marg, scheme)
        ratio, err = ratio_with_error(est.mean, est.stderr, pred.value, pred.stderr)
        rows.append(ConvergenceRow(lv.u, est, pred.value, pred.stderr, ratio, err,
                                   est.n_samples, spec.grid_N, spec.seed, pred.applicable))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([f"{r.u:.10g}", f"{r.estimate.mean:.10g}", f"{r.estimate.stderr:.10g}",
                    f"{r.prediction:.10g}", f"{r.ratio:.10g}", f"{r.ratio_err:.10g}",
                    r.n_samples, r.grid_N, r.seed])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Excess-integral band
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandRow:
    u: float
    x: float
    excess: float
    excess_stderr: float
    theta: float
    theta_left: float
    eps: float
    low: float
    high: float
    inside: bool


def prop2_bounds_check(spec: ExperimentSpec, x_grid, theta: ThetaEstimate,
                       workers=None, result: ExperimentResult | None = None) -> list:
    """Excess integral of L/q(u) against [Theta(x) - 3 eps, Theta(x-) + 3 eps].

    Theta(x-) is taken equal to Theta(x): comparisons are made where Theta
    is continuous within MC error.
    """
    xs = tuple(float(x) for x in x_grid)
    if result is None:
        spec = replace(spec, functional="prop2-integral", x_grid=xs)
        result = run_experiment(spec, workers)
    rows = []
    for lv in result.levels:
        for x in xs:
            ex = lv.prop2.get(x)
            if ex is None or math.isnan(ex.value):
                raise UndefinedRatioError(f"no positive sojourn at u = {lv.u}")
            th, th_se = (1.0, 0.0) if x == 0 else theta.at(x)
            eps = math.hypot(ex.stderr, th_se)
            lo, hi = th - 3 * eps, th + 3 * eps
            rows.append(BandRow(lv.u, x, ex.value, ex.stderr, th, th, eps, lo, hi,
                                bool(lo <= ex.value <= hi)))
    return rows


def band_rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["u", "x", "excess", "excess_stderr", "theta", "theta_left", "eps",
                "low", "high", "inside"])
    for r in rows:
        w.writerow([f"{r.u:.10g}", f"{r.x:.10g}", f"{r.excess:.10g}", f"{r.excess_stderr:.10g}",
                    f"{r.theta:.10g}", f"{r.theta_left:.10g}", f"{r.eps:.10g}",
                    f"{r.low:.10g}", f"{r.high:.10g}", int(r.inside)])
    return buf.getvalue()
