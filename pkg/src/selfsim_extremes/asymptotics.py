"""Exact and asymptotic formulas for order-statistic tails, mean sojourn
times, the occupation-time tail Theta_r of the limiting cluster process and
its slope at zero, and the t-sequence used by the tightness probe."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy import integrate, special, stats

from .errors import (
    EstimationFailureError,
    HorizonError,
    InvalidParameterError,
    QuadratureError,
)
from .kernels import MarginalLaw, ScalingScheme
from .streams import stream


def _check_nr(n, r):
    if int(n) != n or int(r) != r or not 1 <= r <= n:
        raise InvalidParameterError(f"need integers 1 <= r <= n, got n={n}, r={r}")


# ---------------------------------------------------------------------------
# Order-statistic tails
# ---------------------------------------------------------------------------

def binomial_upper(p, n: int, r: int):
    """P(Bin(n, p) >= r), summed term by term in the log domain."""
    _check_nr(n, r)
    p = np.asarray(p, dtype=float)
    j = np.arange(r, n + 1).reshape((-1,) + (1,) * p.ndim)
    with np.errstate(divide="ignore"):
        logs = stats.binom.logpmf(j, n, p[None, ...])
    out = np.exp(special.logsumexp(logs, axis=0))
    return out if out.ndim else float(out)


def order_tail_exact(u, n: int, r: int, marginal: MarginalLaw):
    """P(X_{r:n}(1) > u) for n independent copies."""
    _check_nr(n, r)
    return binomial_upper(marginal.tail(u), n, r)


def order_tail_asymptotic(u, n: int, r: int, marginal: MarginalLaw,
                          scheme: ScalingScheme | None = None):
    """Leading term C(n, r) G(u)^r and the rate w_r(u) = r w(u)."""
    _check_nr(n, r)
    g = np.asarray(marginal.tail(u), dtype=float)
    prob = special.comb(n, r, exact=False) * g ** r
    w = scheme.w(u) if scheme is not None else np.maximum(1.0, u)
    prob = prob if prob.ndim else float(prob)
    w_r = r * w
    return prob, (w_r if np.ndim(w_r) else float(w_r))


def mean_sojourn_exact(u: float, n: int, r: int, marginal: MarginalLaw, kappa: float,
                       epsrel: float = 1e-9) -> float:
    """E L_r(u) = int_0^1 P(X_{r:n}(1) > u t^(-kappa)) dt.

    Substituting x = u t^(-kappa) gives
    (u^(1/kappa) / kappa) int_u^inf G_r(x) x^(-1/kappa - 1) dx,
    which puts all the mass near the lower limit.
    """
    _check_nr(n, r)
    if not u > 0:
        raise InvalidParameterError(f"mean sojourn needs u > 0, got {u}")
    if not kappa > 0:
        raise InvalidParameterError(f"kappa must be positive, got {kappa}")
    c = 1.0 / kappa

    def f(x):
        return order_tail_exact(x, n, r, marginal) * (u / x) ** (c + 1.0)

    # split at a few scales of the tail decay so quad sees each piece
    edges = [u, u + 0.5, u + 2.0, u + 6.0, u + 20.0, u + 60.0]
    total, err = 0.0, 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        val, e = integrate.quad(f, a, b, epsabs=0.0, epsrel=epsrel, limit=200)
        total += val
        err += e
    val, e = integrate.quad(f, edges[-1], np.inf, epsabs=0.0, epsrel=epsrel, limit=200)
    total += val
    err += e
    total *= c / u
    err *= c / u
    if not np.isfinite(total) or (total > 0 and err > 1e-6 * total):
        raise QuadratureError(f"mean sojourn quadrature: value {total:g}, error estimate {err:g}")
    return float(total)


def mean_sojourn_asymptotic(u: float, n: int, r: int, marginal: MarginalLaw, kappa: float,
                            scheme: ScalingScheme | None = None, leading: bool = False) -> float:
    """G_r(u) / (kappa u r w(u)); ``leading`` swaps in C(n,r) G(u)^r for G_r."""
    _check_nr(n, r)
    if not u > 0:
        raise InvalidParameterError(f"mean sojourn needs u > 0, got {u}")
    w = float(scheme.w(u)) if scheme is not None else max(1.0, u)
    g = order_tail_asymptotic(u, n, r, marginal)[0] if leading else order_tail_exact(u, n, r, marginal)
    return float(g) / (kappa * u * r * w)


# ---------------------------------------------------------------------------
# Theta_r
# ---------------------------------------------------------------------------

def theta_case_b(x, kappa: float, r: int):
    """exp(-kappa r x): occupation tail of min_i(E_i - kappa t)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidParameterError("x must be >= 0")
    out = np.exp(-kappa * r * x)
    return out if out.ndim else float(out)


@dataclass
class ThetaEstimate:
    x_grid: np.ndarray
    theta: np.ndarray
    stderr: np.ndarray
    r: int
    kappa: float
    n: int = 0
    T_used: float = math.inf
    step: float = 0.0
    mean_occupation: float = math.nan
    mean_occupation_stderr: float = math.nan
    derivative_at_zero: float = math.nan
    derivative_stderr: float = math.nan
    closed_form: bool = False
    refinements: list = field(default_factory=list)

    @classmethod
    def from_closed_form(cls, x_grid, kappa: float, r: int) -> "ThetaEstimate":
        x = np.asarray(x_grid, dtype=float)
        th = theta_case_b(np.atleast_1d(x), kappa, r)
        return cls(x, np.atleast_1d(th), np.zeros_like(np.atleast_1d(x)), r, kappa,
                   mean_occupation=1.0 / (kappa * r), mean_occupation_stderr=0.0,
                   derivative_at_zero=kappa * r, derivative_stderr=0.0, closed_form=True)

    def at(self, x: float) -> tuple[float, float]:
        i = int(np.argmin(np.abs(self.x_grid - x)))
        if abs(self.x_grid[i] - x) > 1e-12:
            raise InvalidParameterError(f"x = {x} is not on the Theta grid")
        return float(self.theta[i]), float(self.stderr[i])

    def to_csv(self) -> str:
        lines = ["x,theta,stderr"]
        for x, t, s in zip(self.x_grid, self.theta, self.stderr):
            lines.append(f"{x:.10g},{t:.10g},{s:.10g}")
        return "\n".join(lines) + "\n"

    def derivative_record(self) -> str:
        return (f"derivative_at_zero,{self.derivative_at_zero:.10g}\n"
                f"derivative_stderr,{self.derivative_stderr:.10g}\n"
                f"mean_occupation,{self.mean_occupation:.10g}\n"
                f"T_used,{self.T_used:.10g}\nstep,{self.step:.10g}\nn,{self.n}\n")


DRIFT_ONLY_STEP = 1e-6
HORIZON_TAIL = 1e-3
HORIZON_GROWTH_LIMIT = 2 ** 16


def default_theta_step(alpha: float, D: float) -> float:
    return min(0.05, 0.2 * D ** (-1.0 / alpha))


def _initial_horizon(alpha, D, kappa, beta4, r):
    if alpha > 1.0:
        return 4.0 / (kappa * r)
    # where the drift D t^alpha is twice the noise scale sqrt(2D) t^(alpha/2)
    return max(4.0, (2.0 * math.sqrt(2.0 / D)) ** (2.0 / alpha))


class _Accumulator:
    def __init__(self, x_grid):
        self.x = np.asarray(x_grid, dtype=float)
        self.n = 0
        self.exceed = np.zeros(self.x.size, dtype=np.int64)
        self.sum_L = 0.0
        self.sum_LL = 0.0
        self.beyond = 0

    def add(self, L, beyond):
        self.n += L.size
        self.exceed += (L[:, None] > self.x[None, :]).sum(axis=0)
        self.sum_L += float(L.sum())
        self.sum_LL += float((L * L).sum())
        self.beyond += int(beyond)


def _fgn_sqrt_eig(H: float, n: int) -> np.ndarray:
    k = np.arange(n + 1, dtype=float)
    g = 0.5 * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H) + np.abs(k - 1) ** (2 * H))
    row = np.concatenate([g, g[-2:0:-1]])
    lam = scipy.fft.fft(row).real
    if lam.min() < -1e-9:
        raise EstimationFailureError("fractional Gaussian noise embedding is not PSD")
    return np.sqrt(np.clip(lam, 0, None) / row.size)


def _fbm_batch(H: float, n_steps: int, count: int, rng, sqrt_eig) -> np.ndarray:
    """``count`` unit-step fBm paths Z(1..n_steps); Z(0) = 0 is implicit."""
    if H == 0.5:
        return np.cumsum(rng.standard_normal((count, n_steps)), axis=1)
    M = sqrt_eig.size
    pairs = (count + 1) // 2
    z = rng.standard_normal((pairs, 2, M))
    y = scipy.fft.fft((z[:, 0] + 1j * z[:, 1]) * sqrt_eig, axis=-1)[:, :n_steps]
    inc = np.empty((2 * pairs, n_steps))
    inc[0::2] = y.real
    inc[1::2] = y.imag
    return np.cumsum(inc[:count], axis=1)


def _theta_batch(r, alpha, D, kappa, beta4, T, step, count, rng, sqrt_eig):
    """Occupation times of xi_{r:r} for ``count`` draws, plus how many of them
    still exceed beyond T/2."""
    e = rng.standard_exponential((count, r))
    if alpha > 1.0:
        y = e.min(axis=1) / kappa
        # cell rule on the grid j*step, j >= 1: count of j with j*step < y
        cells = np.ceil(y / step) - 1.0
        n_cells = math.floor(T / step)
        L = np.minimum(cells, n_cells) * step
        return L, int(np.count_nonzero(y > T / 2))
    n_steps = int(math.ceil(T / step))
    t = step * np.arange(1, n_steps + 1)
    H = alpha / 2.0
    drift = D * t ** alpha + beta4 * kappa * t
    scale = math.sqrt(2.0 * D) * step ** H
    xi = None
    for i in range(r):
        z = _fbm_batch(H, n_steps, count, rng, sqrt_eig)
        xi_i = scale * z - drift[None, :] + e[:, i:i + 1]
        xi = xi_i if xi is None else np.minimum(xi, xi_i)
    above = xi > 0
    L = above.sum(axis=1) * step
    half = n_steps // 2
    beyond = int(np.count_nonzero(above[:, half:].any(axis=1)))
    return L, beyond


def estimate_theta(r: int, alpha: float, D: float, kappa: float, beta4: float,
                   x_grid, n_draws: int = 100_000, seed: int = 0, step: float | None = None,
                   T0: float | None = None, batch: int = 512, fit_points: int = 5,
                   transform: str = "log") -> ThetaEstimate:
    """Monte-Carlo tail of the occupation time of
    xi_{r:r}(t) = min_i (sqrt(2D) Z_i(t) - D t^alpha + E_i - beta4 kappa t)
    with Z_i standard fBm of Hurst alpha/2 and E_i unit exponential.

    For alpha > 1 the limit is the drift-only xi_i(t) = E_i - kappa t, whose
    cell-rule occupation is counted in closed form per draw.
    Theta(0) is 1 by definition. The horizon T doubles until fewer than 1e-3
    of the draws still exceed beyond T/2.
    """
    if int(r) != r or r < 1:
        raise InvalidParameterError(f"r must be a positive integer, got {r}")
    if not 0 < alpha <= 2 or not D > 0 or not kappa > 0:
        raise InvalidParameterError("need 0 < alpha <= 2, D > 0 and kappa > 0")
    x = np.asarray(x_grid, dtype=float)
    if x.ndim != 1 or x.size == 0 or np.any(np.diff(x) <= 0) or x[0] < 0:
        raise InvalidParameterError("x_grid must be non-negative and strictly increasing")
    if step is None:
        step = DRIFT_ONLY_STEP if alpha > 1.0 else default_theta_step(alpha, D)
    T = float(T0) if T0 is not None else _initial_horizon(alpha, D, kappa, beta4, r)
    T_start = T
    while True:
        if T > HORIZON_GROWTH_LIMIT * T_start:
            raise HorizonError(f"occupation horizon failed to settle below T = {T:g}")
        n_steps = int(math.ceil(T / step))
        sqrt_eig = None
        if alpha < 1.0:
            sqrt_eig = _fgn_sqrt_eig(alpha / 2.0, n_steps)
        acc = _Accumulator(x)
        pilot = min(n_draws, 4 * batch)
        ok = True
        for b, lo in enumerate(range(0, n_draws, batch)):
            count = min(batch, n_draws - lo)
            L, beyond = _theta_batch(r, alpha, D, kappa, beta4, T, step, count,
                                     stream(seed, b, "theta"), sqrt_eig)
            acc.add(L, beyond)
            if acc.n >= pilot and acc.beyond > HORIZON_TAIL * acc.n:
                ok = False
                break
        if ok and acc.beyond <= HORIZON_TAIL * acc.n:
            break
        T *= 2.0
    n = acc.n
    p = acc.exceed / n
    theta = np.where(x == 0, 1.0, p)
    se = np.where(x == 0, 0.0, np.sqrt(p * (1 - p) / n))
    mean = acc.sum_L / n
    var = max(acc.sum_LL / n - mean * mean, 0.0)
    est = ThetaEstimate(x, theta, se, int(r), float(kappa), n=n, T_used=T, step=step,
                        mean_occupation=mean,
                        mean_occupation_stderr=math.sqrt(var / max(n - 1, 1)))
    try:
        d, dse = theta_prime_at_zero(est, fit_points=fit_points, transform=transform)
        est.derivative_at_zero, est.derivative_stderr = d, dse
    except EstimationFailureError:
        pass
    return est


def theta_prime_at_zero(theta: ThetaEstimate, fit_points: int = 5,
                        transform: str = "log") -> tuple[float, float]:
    """-Theta'(0) by a weighted least-squares line through the origin over
    the smallest 3 to 5 positive grid points with x <= half the mean
    occupation.

    ``transform="linear"`` regresses 1 - Theta(x) on x. ``"log"`` regresses
    -log Theta(x), which has the same slope at zero and no curvature when
    Theta is exponential. The standard error accounts for the correlation of
    the nested events {L > x_i}.
    """
    if theta.closed_form:
        return float(theta.derivative_at_zero), 0.0
    if transform not in ("log", "linear"):
        raise InvalidParameterError(f"unknown transform {transform!r}")
    if not 3 <= fit_points <= 5:
        raise InvalidParameterError("fit uses between 3 and 5 points")
    x = theta.x_grid
    limit = 0.5 * theta.mean_occupation if np.isfinite(theta.mean_occupation) else np.inf
    sel = np.flatnonzero((x > 0) & (x <= limit))[:fit_points]
    if sel.size < 3:
        raise EstimationFailureError(
            f"need 3 grid points in (0, {limit:.4g}], found {sel.size}; refine x_grid")
    xs, th = x[sel], theta.theta[sel]
    n = max(theta.n, 1)
    if np.any(th <= 0):
        raise EstimationFailureError("Theta estimate vanishes on the fit points")
    # covariance of the estimated Theta values (nested indicators)
    tm = np.minimum.outer(th, th)       # P(L > max x) = min Theta
    cov = (tm - np.outer(th, th)) / n
    if transform == "log":
        y = -np.log(th)
        jac = np.diag(1.0 / th)
        cov = jac @ cov @ jac
    else:
        y = 1.0 - th
    var = np.maximum(np.diag(cov), 1.0 / (n * n))
    w = 1.0 / var
    c = w * xs / np.sum(w * xs * xs)
    slope = float(c @ y)
    se = float(math.sqrt(max(c @ cov @ c, 0.0)))
    if not slope > 0:
        raise EstimationFailureError(
            f"non-positive slope {slope:.3g} at zero; the x grid does not resolve Theta near 0")
    return slope, se


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    value: float
    stderr: float
    applicable: bool
    note: str = ""


def p_prediction_thm4(u: float, n: int, r: int, marginal: MarginalLaw, kappa: float,
                      scheme: ScalingScheme, theta_prime: float,
                      theta_prime_stderr: float = 0.0, pathway: str = "beta") -> Prediction:
    """-Theta_r'(0) * E L_r(u) / q(u).

    Applicable when 0 < beta3 <= beta4 < inf (``pathway="beta"``) or when
    the caller vouches for conditions B and C* (``pathway="cstar"``).
    """
    base = mean_sojourn_exact(u, n, r, marginal, kappa) / float(scheme.q(u))
    if pathway == "beta":
        ok = 0.0 < scheme.beta3 <= scheme.beta4 < math.inf
        note = "" if ok else f"beta3={scheme.beta3:g}, beta4={scheme.beta4:g} outside (0, inf)"
    elif pathway == "cstar":
        ok, note = True, "conditions B and C* assumed"
    else:
        raise InvalidParameterError(f"unknown pathway {pathway!r}")
    return Prediction(theta_prime * base, theta_prime_stderr * base, ok, note)


def p_prediction_thm3(u: float, n: int, r: int, marginal: MarginalLaw,
                      scheme: ScalingScheme | None = None) -> Prediction:
    """G_r(u); only applicable when beta3 is infinite."""
    ok = scheme is not None and scheme.beta3 == math.inf
    note = "" if ok else "requires beta3 = inf; not met by this scaling"
    return Prediction(float(order_tail_exact(u, n, r, marginal)), 0.0, ok, note)


# ---------------------------------------------------------------------------
# t-sequence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TSequence:
    a: float
    u: float
    points: np.ndarray
    truncated: bool = False

    @property
    def K(self) -> int:
        return int(self.points.size - 1)


def t_sequence(a: float, u: float, kappa: float, scheme: ScalingScheme,
               t_min: float = 1e-3, max_points: int = 2_000_000) -> TSequence:
    """t(0) = 1, t(k+1) = t(k) (1 - a q(t(k)^(-kappa) u)), down to t_min."""
    if not 0.0 < a <= scheme.a_tilde:
        raise InvalidParameterError(f"a must lie in (0, {scheme.a_tilde:g}], got {a}")
    if not u > 0:
        raise InvalidParameterError(f"u must be positive, got {u}")
    pts = [1.0]
    t = 1.0
    truncated = False
    while t > t_min:
        if len(pts) >= max_points:
            truncated = True
            break
        t = t * (1.0 - a * float(scheme.q(t ** (-kappa) * u)))
        pts.append(t)
    arr = np.array(pts)
    arr.setflags(write=False)
    return TSequence(float(a), float(u), arr, truncated)
