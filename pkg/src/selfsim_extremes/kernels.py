"""Covariance kernels of self-similar Gaussian processes, their Lamperti
transforms, local expansions at t = 1, marginal laws and scaling schemes.

All kernel functions are vectorised over ``s`` and ``t`` with numpy
broadcasting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize, stats

from .errors import (
    ExpansionNotApplicableError,
    InconsistencyError,
    InvalidParameterError,
    QuadratureError,
)

SELF_SIMILARITY_RTOL = 1e-10
STATIONARITY_ATOL = 1e-9
JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10)


# ---------------------------------------------------------------------------
# Kernel formulas (module level so kernels pickle cleanly)
# ---------------------------------------------------------------------------

def _fbm_cov(s, t, H):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    a = 2.0 * H
    return 0.5 * (s**a + t**a - np.abs(s - t) ** a)


def _bifbm_cov(s, t, h, k):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return 2.0**-k * ((s ** (2 * h) + t ** (2 * h)) ** k - np.abs(s - t) ** (2 * h * k))


def _subfbm_cov(s, t, h):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    a = 2.0 * h
    return s**a + t**a - 0.5 * ((s + t) ** a + np.abs(s - t) ** a)


@dataclass(frozen=True)
class CovarianceKernel:
    """Covariance R(s, t) of a centred self-similar process with index kappa.

    ``scale`` multiplies the raw formula; :meth:`standardized` sets it so that
    R(1, 1) = 1.
    """

    name: str
    kappa: float
    func: Callable = field(repr=False, compare=True)
    params: tuple = ()
    scale: float = 1.0
    gaussian: bool = True

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    def evaluate(self, s, t):
        return self.scale * self.func(s, t, **self.param_dict)

    __call__ = evaluate

    @property
    def variance_at_one(self) -> float:
        return float(self.evaluate(1.0, 1.0))

    def is_standardized(self, tol: float = 1e-9) -> bool:
        return abs(self.variance_at_one - 1.0) <= tol

    def standardized(self) -> "CovarianceKernel":
        if self.is_standardized(1e-15):
            return self
        v = self.func(1.0, 1.0, **self.param_dict)
        if not v > 0:
            raise InvalidParameterError(f"{self.name}: R(1,1) = {v} is not positive")
        return CovarianceKernel(self.name, self.kappa, self.func, self.params,
                                1.0 / float(v), self.gaussian)

    def gram(self, times) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        return self.evaluate(t[:, None], t[None, :])

    def label(self) -> str:
        inner = ", ".join(f"{k}={v:g}" for k, v in self.params)
        return f"{self.name}({inner})"


def fbm_kernel(H: float) -> CovarianceKernel:
    """Fractional Brownian motion with Hurst index ``H`` in (0, 1]."""
    if not 0.0 < H <= 1.0:
        raise InvalidParameterError(f"Hurst index must lie in (0, 1], got {H}")
    return CovarianceKernel("fbm", float(H), _fbm_cov, (("H", float(H)),))


def bifbm_kernel(h: float, k: float) -> CovarianceKernel:
    """Bi-fractional Brownian motion B_{h,k}; index h*k."""
    if not 0.0 < h < 1.0:
        raise InvalidParameterError(f"h must lie in (0, 1), got {h}")
    if not 0.0 < k <= 1.0:
        raise InvalidParameterError(f"k must lie in (0, 1], got {k}")
    return CovarianceKernel("bifbm", float(h * k), _bifbm_cov,
                            (("h", float(h)), ("k", float(k))))


def subfbm_kernel(h: float) -> CovarianceKernel:
    """Sub-fractional Brownian motion S_h; index h, Var S_h(1) = 2 - 2^(2h-1)."""
    if not 0.0 < h < 1.0:
        raise InvalidParameterError(f"h must lie in (0, 1), got {h}")
    return CovarianceKernel("subfbm", float(h), _subfbm_cov, (("h", float(h)),))


KERNEL_FACTORIES = {
    "fbm": (fbm_kernel, ("H",)),
    "brownian": (lambda: fbm_kernel(0.5), ()),
    "bifbm": (bifbm_kernel, ("h", "k")),
    "subfbm": (subfbm_kernel, ("h",)),
}


def make_kernel(name: str, **params) -> CovarianceKernel:
    """Build a kernel by name (used by the config layer)."""
    try:
        factory, names = KERNEL_FACTORIES[name]
    except KeyError:
        raise InvalidParameterError(
            f"unknown kernel {name!r}; choose from {sorted(KERNEL_FACTORIES)}") from None
    missing = set(names) - set(params)
    extra = set(params) - set(names)
    if missing or extra:
        raise InvalidParameterError(
            f"kernel {name!r} takes parameters {list(names)}, got {sorted(params)}")
    return factory(**{k: float(params[k]) for k in names})


def check_self_similarity(kernel: CovarianceKernel, lambdas=(0.5, 2.0, 10.0),
                          n_points: int = 12, rtol: float = SELF_SIMILARITY_RTOL) -> float:
    """Worst relative violation of R(ls, lt) = l^(2 kappa) R(s, t) on (0, 1]^2."""
    pts = np.linspace(1.0 / n_points, 1.0, n_points)
    s, t = np.meshgrid(pts, pts)
    base = kernel.evaluate(s, t)
    worst = 0.0
    for lam in lambdas:
        scaled = kernel.evaluate(lam * s, lam * t)
        target = lam ** (2 * kernel.kappa) * base
        denom = np.maximum(np.abs(target), 1e-300)
        worst = max(worst, float(np.max(np.abs(scaled - target) / denom)))
    return worst


# ---------------------------------------------------------------------------
# Lamperti transform
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StationaryKernel:
    """Covariance r(tau) of the Lamperti transform exp(-kappa t) X(exp t)."""

    source: CovarianceKernel

    @property
    def kappa(self) -> float:
        return self.source.kappa

    def at_base(self, tau, base: float = 0.0):
        tau = np.abs(np.asarray(tau, dtype=float))
        return (np.exp(-self.source.kappa * (2.0 * base + tau))
                * self.source.evaluate(np.exp(base), np.exp(base + tau)))

    def __call__(self, tau):
        return self.at_base(tau, 0.0)

    @property
    def variance(self) -> float:
        return float(self(0.0))


def lamperti_kernel(kernel: CovarianceKernel, lags=None) -> StationaryKernel:
    """Stationary kernel of the Lamperti transform, after checking that the
    result does not depend on the base point."""
    sk = StationaryKernel(kernel)
    if lags is None:
        lags = np.linspace(0.0, 5.0, 50)
    r0 = sk.at_base(lags, 0.0)
    r1 = sk.at_base(lags, 1.0)
    gap = float(np.max(np.abs(r0 - r1) / np.maximum(1.0, np.abs(r0))))
    if not gap <= STATIONARITY_ATOL:
        raise InconsistencyError(
            f"{kernel.label()}: Lamperti transform is not stationary "
            f"(base points 0 and 1 differ by {gap:.3g}); kernel is not self-similar "
            f"with index {kernel.kappa}")
    return sk


# ---------------------------------------------------------------------------
# Local expansion at t = 1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalExpansion:
    """R(1, 1+t) = 1 + kappa t - D |t|^alpha + c2 t^2 + ... near t = 0."""

    kappa: float
    D: float
    alpha: float
    c2: float = 0.0
    residual: float = 0.0
    kappa_fit: float | None = None

    def __post_init__(self):
        if not (0.0 < self.alpha <= 2.0 + 1e-9) or not self.D > 0:
            raise ExpansionNotApplicableError(
                f"fitted alpha={self.alpha:.4g}, D={self.D:.4g} outside alpha in (0,2], D > 0")


EXPANSION_LAGS = np.logspace(-6, -2, 40)


def local_expansion(kernel: CovarianceKernel, tol: float = 1e-3,
                    kappa_tol: float = 1e-3) -> LocalExpansion:
    """Least-squares fit of (D, alpha) with kappa held at the kernel index.

    A second free fit re-estimates kappa as a consistency check; it is skipped
    when alpha is within 0.05 of 1, where the kappa*t and D*t^alpha terms are
    not separately identifiable.
    """
    k = kernel.standardized()
    kap = k.kappa
    t = EXPANSION_LAGS
    y = k.evaluate(1.0, 1.0 + t) - 1.0
    g = kap * t - y                              # = D t^a - c2 t^2 + ...
    if np.any(g <= 0):
        raise ExpansionNotApplicableError(
            f"{kernel.label()}: kappa*t - (R(1,1+t)-1) is not positive on the fit grid")
    scale = np.abs(g)
    lt = np.log(t)
    slope, icpt = np.polyfit(lt, np.log(g), 1)

    def resid(p):
        logD, a, c2 = p
        return (np.exp(logD) * t**a - c2 * t**2 - g) / scale

    fit = optimize.least_squares(resid, [icpt, slope, 0.0], xtol=1e-15, ftol=1e-15,
                                 gtol=1e-15, max_nfev=2000)
    logD, a, c2 = fit.x
    residual = float(np.max(np.abs(fit.fun)))
    if not residual <= tol:
        raise ExpansionNotApplicableError(
            f"{kernel.label()}: local expansion residual {residual:.3g} exceeds {tol:g}")

    kappa_fit = None
    if abs(a - 1.0) > 0.05:
        yscale = np.abs(kap * t) + np.exp(logD) * t**a

        def resid_free(p):
            kk, lD, aa, cc = p
            return (kk * t - np.exp(lD) * t**aa + cc * t**2 - y) / yscale

        free = optimize.least_squares(resid_free, [kap, logD, a, c2], xtol=1e-15,
                                      ftol=1e-15, gtol=1e-15, max_nfev=4000)
        kappa_fit = float(free.x[0])
        if abs(kappa_fit - kap) > kappa_tol:
            raise ExpansionNotApplicableError(
                f"{kernel.label()}: fitted drift {kappa_fit:.5g} disagrees with index {kap}")
    return LocalExpansion(kap, float(np.exp(logD)), float(a), float(c2), residual, kappa_fit)


def known_expansion(kernel: CovarianceKernel) -> LocalExpansion | None:
    """Closed-form (D, alpha) of the standardized built-in families, or None."""
    p = kernel.param_dict
    if kernel.name == "fbm":
        return LocalExpansion(kernel.kappa, 0.5, 2.0 * p["H"])
    if kernel.name == "bifbm":
        return LocalExpansion(kernel.kappa, 2.0 ** -p["k"], 2.0 * p["h"] * p["k"])
    if kernel.name == "subfbm":
        h = p["h"]
        return LocalExpansion(kernel.kappa, 1.0 / (2.0 * (2.0 - 2.0 ** (2 * h - 1))), 2.0 * h)
    return None


def check_supboundcov(kernel: CovarianceKernel, eps: float, h: float,
                      n_points: int = 2001) -> tuple[bool, float]:
    """Whether sup over [eps, h] of exp(-kappa t) R(1, exp t) is below 1."""
    if not 0.0 < eps <= h:
        raise InvalidParameterError(f"need 0 < eps <= h, got eps={eps}, h={h}")
    k = kernel.standardized()
    t = np.array([eps]) if eps == h else np.linspace(eps, h, n_points)
    vals = np.exp(-k.kappa * t) * k.evaluate(1.0, np.exp(t))
    m = float(np.max(vals))
    return m < 1.0, m


# ---------------------------------------------------------------------------
# Marginal laws
# ---------------------------------------------------------------------------

class MarginalLaw:
    """Law of X(1): survival function, cdf and quantile on the real line."""

    name = "marginal"
    right_endpoint = math.inf

    def tail(self, u):
        raise NotImplementedError

    def cdf(self, u):
        return 1.0 - np.asarray(self.tail(u))

    def isf(self, p):
        """Level with tail probability ``p``."""
        raise NotImplementedError

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        return self.isf(1.0 - p)


class GaussianMarginal(MarginalLaw):
    name = "gaussian"

    def tail(self, u):
        return stats.norm.sf(u)

    def cdf(self, u):
        return stats.norm.cdf(u)

    def isf(self, p):
        return stats.norm.isf(p)

    def quantile(self, p):
        return stats.norm.ppf(p)

    def __repr__(self):
        return "GaussianMarginal()"


class SkewMarginal(MarginalLaw):
    """Law of delta*|chi_m| + sqrt(1-delta^2)*N with independent N(0,1) parts."""

    name = "skew"

    def __init__(self, delta: float, m: int):
        self.delta = float(delta)
        self.m = int(m)
        self.sigma = math.sqrt(max(0.0, 1.0 - self.delta**2))
        self._chi = stats.chi(self.m)

    def __repr__(self):
        return f"SkewMarginal(delta={self.delta}, m={self.m})"

    def _tail_scalar(self, u: float) -> float:
        if self.delta == 0.0:
            return float(stats.norm.sf(u))
        if self.sigma == 0.0:
            return float(self._chi.sf(u)) if u > 0 else 1.0
        d, sg, chi = self.delta, self.sigma, self._chi

        def f(s):
            return chi.pdf(s) * stats.norm.sf((u - d * s) / sg)

        # the integrand peaks near s = delta*u for large u; the chi density is
        # negligible (< 1e-20) beyond the upper limit
        hi = max(chi.isf(1e-20), d * max(u, 0.0)) + 12.0
        peak = min(max(d * u, 0.0), hi)
        pts = sorted({0.0, peak, hi})
        total = 0.0
        for a, b in zip(pts[:-1], pts[1:]):
            if b <= a:
                continue
            val, err, *rest = integrate.quad(f, a, b, epsabs=0.0, epsrel=1e-11,
                                             limit=400, full_output=1)
            if len(rest) > 1 and err > 1e-8 * max(abs(val), 1e-300):
                raise QuadratureError(f"skew tail at u={u}: {rest[1]}")
            total += val
        return total

    def tail(self, u):
        u_arr = np.asarray(u, dtype=float)
        out = np.vectorize(self._tail_scalar, otypes=[float])(u_arr)
        return out if out.ndim else float(out)

    def _isf_scalar(self, p: float) -> float:
        if not 0.0 < p < 1.0:
            if p == 0.0:
                return math.inf
            if p == 1.0:
                return -math.inf if self.sigma > 0 else 0.0
            raise InvalidParameterError(f"probability must lie in [0, 1], got {p}")
        if self.delta == 0.0:
            return float(stats.norm.isf(p))
        if self.sigma == 0.0:
            return float(self._chi.isf(p))
        target = math.log(p)

        def h(x):
            return math.log(max(self._tail_scalar(x), 1e-300)) - target

        lo, hi = -1.0, 1.0
        while h(lo) < 0:
            lo *= 2.0
        while h(hi) > 0:
            hi *= 2.0
        return optimize.brentq(h, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=300)

    def isf(self, p):
        p_arr = np.asarray(p, dtype=float)
        out = np.vectorize(self._isf_scalar, otypes=[float])(p_arr)
        return out if out.ndim else float(out)

    def quantile(self, p):
        p_arr = np.asarray(p, dtype=float)
        out = np.vectorize(lambda v: self._isf_scalar(1.0 - v), otypes=[float])(p_arr)
        return out if out.ndim else float(out)


def gaussian_marginal() -> GaussianMarginal:
    return GaussianMarginal()


def skew_marginal(delta: float, m: int) -> SkewMarginal:
    if not 0.0 <= delta <= 1.0:
        raise InvalidParameterError(f"delta must lie in [0, 1], got {delta}")
    if int(m) != m or m < 1:
        raise InvalidParameterError(f"m must be a positive integer, got {m}")
    return SkewMarginal(delta, int(m))


# ---------------------------------------------------------------------------
# Scaling schemes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingScheme:
    """w(u) = max(1, u) and q(u) = max(1, u)^(-q_exponent).

    ``beta3``/``beta4`` are the liminf/limsup of u*q*w. With exact power laws
    u*q*w = u^(2 - q_exponent) for u >= 1, so both limits follow from the sign
    of that exponent.
    """

    alpha: float
    kappa: float
    q_exponent: float
    D0: float = 1.0

    @property
    def alpha0(self) -> float:
        return self.q_exponent

    @property
    def _uqw_exponent(self) -> float:
        return 2.0 - self.q_exponent

    @property
    def beta3(self) -> float:
        e = self._uqw_exponent
        if abs(e) < 1e-12:
            return self.D0
        return math.inf if e > 0 else 0.0

    @property
    def beta4(self) -> float:
        return self.beta3

    @property
    def q_sup(self) -> float:
        return self.D0

    @property
    def a_tilde(self) -> float:
        return 1.0 / (2.0 * self.q_sup)

    def w(self, u):
        return np.maximum(1.0, u)

    def q(self, u):
        return self.D0 * np.maximum(1.0, u) ** (-self.q_exponent)


def scaling_scheme_for(alpha: float, kappa: float) -> ScalingScheme:
    """Scaling of the skew-Gaussian family: q = max(1,u)^(-2/alpha) for
    alpha <= 1 and max(1,u)^(-2) for alpha in (1, 2]."""
    if not 0.0 < alpha <= 2.0:
        raise InvalidParameterError(f"alpha must lie in (0, 2], got {alpha}")
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be positive, got {kappa}")
    expo = 2.0 / alpha if alpha <= 1.0 else 2.0
    return ScalingScheme(float(alpha), float(kappa), expo)
