import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from selfsim_extremes.asymptotics import mean_sojourn_exact
from selfsim_extremes.errors import (
    InvalidParameterError,
    ShapeError,
    UndefinedRatioError,
)
from selfsim_extremes.functionals import (
    excess_integral,
    excess_integral_moments,
    horizon_rescale,
    path_sup,
    sojourn,
    sojourn_times,
    sup_sojourn_mismatch,
)
from selfsim_extremes.kernels import fbm_kernel, gaussian_marginal
from selfsim_extremes.pathsim import make_grid, simulate_gaussian
from selfsim_extremes.streams import stream

# int_0^1 P(N(0,1) > t^(-1/2)) dt, computed once with adaptive quadrature
BM_MEAN_SOJOURN_U1 = 0.07533978


def test_frozen_oracle_matches_quadrature():
    assert mean_sojourn_exact(1.0, 1, 1, gaussian_marginal(), 0.5) == pytest.approx(
        BM_MEAN_SOJOURN_U1, rel=1e-6)


def test_path_sup():
    assert path_sup([1.0, 3.0, 2.0]) == 3.0
    with pytest.raises(ShapeError):
        path_sup([])


def test_full_occupation():
    g = make_grid("log-uniform", 200, 1e-3)
    L = sojourn_times(np.full(200, 5.0), g.times, 0.0)
    assert L[0] == pytest.approx(1.0 - 1e-3, abs=1e-12)
    gu = make_grid("uniform", 10)
    assert sojourn_times(np.ones(10), gu.times, 0.0)[0] == pytest.approx(0.9)


def test_no_occupation_and_partial_horizon():
    g = make_grid("uniform", 10)
    assert sojourn_times(np.zeros(10), g.times, 1.0)[0] == 0.0
    assert sojourn_times(np.ones(10), g.times, 0.0, s=0.5)[0] == pytest.approx(0.4)
    with pytest.raises(InvalidParameterError):
        sojourn_times(np.ones(10), g.times, 0.0, s=1.5)
    with pytest.raises(ShapeError):
        sojourn_times(np.ones(9), g.times, 0.0)


def test_sojourn_sample_normalization():
    g = make_grid("uniform", 4)
    s = sojourn(np.array([0, 2, 2, 0.0]), g.times, 1.0, r=2, q=0.25)
    assert s.L == pytest.approx(0.5)
    assert s.normalized == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1), st.floats(0, 1))
def test_sojourn_monotone_in_level(seed, u, du):
    g = make_grid("uniform", 32)
    v = stream(seed).standard_normal((4, 32))
    assert np.all(sojourn_times(v, g.times, u + du) <= sojourn_times(v, g.times, u))


def test_brownian_mean_sojourn():
    g = make_grid("uniform", 4096)
    L = np.concatenate([sojourn_times(simulate_gaussian(fbm_kernel(0.5), g, 2000,
                                                        stream(1, b)), g.times, 1.0)
                        for b in range(10)])
    assert L.mean() == pytest.approx(BM_MEAN_SOJOURN_U1, rel=0.02 + 3 * L.std()
                                     / math.sqrt(L.size) / BM_MEAN_SOJOURN_U1)
    assert abs(L.mean() - BM_MEAN_SOJOURN_U1) <= 3.5 * L.std() / math.sqrt(L.size)


def test_horizon_rescale_value():
    assert horizon_rescale(2.0, 4.0, 0.5) == pytest.approx(1.0)
    assert np.allclose(horizon_rescale(np.array([2.0, 4.0]), 4.0, 0.5), [1.0, 2.0])
    with pytest.raises(InvalidParameterError):
        horizon_rescale(1.0, 0.0, 0.5)


def test_horizon_rescale_reflection_principle():
    # P(sup_[0,4] W > 2) = P(sup_[0,1] W > 1) = 2 P(N > 1)
    g = make_grid("uniform", 4096)
    level = horizon_rescale(2.0, 4.0, 0.5)
    hits, n = 0, 0
    for b in range(10):
        x = simulate_gaussian(fbm_kernel(0.5), g, 2000, stream(2, b))
        hits += int(np.count_nonzero(path_sup(x) > level))
        n += x.shape[0]
    target = 2 * stats.norm.sf(1.0)
    assert target == pytest.approx(0.3173, abs=1e-4)
    # the grid maximum undershoots the continuous one by about 0.58/sqrt(N)
    assert abs(hits / n - target) <= 0.015


def test_mismatch_counts_only_first_point():
    g = make_grid("uniform", 4)
    v = np.array([[3.0, 0, 0, 0], [3.0, 3.0, 0, 0], [0, 0, 0, 0.0]])
    assert sup_sojourn_mismatch(v, g.times, 1.0) == 1


# --- excess integral ---------------------------------------------------------

def test_excess_integral_at_zero_is_one():
    y = stream(3).exponential(size=1000)
    assert excess_integral(y, 0.0).value == pytest.approx(1.0)


def test_excess_integral_constant():
    r = excess_integral(np.ones(50), 0.5)
    assert r.value == pytest.approx(0.5)
    assert r.stderr == pytest.approx(0.0, abs=1e-12)


def test_excess_integral_exponential():
    # E(Y - x)^+ / E Y = exp(-x) for unit exponential Y
    y = stream(4).exponential(size=400_000)
    for x in (0.2, 0.5, 1.0):
        r = excess_integral(y, x)
        assert abs(r.value - math.exp(-x)) <= 4 * r.stderr


def test_excess_integral_errors():
    with pytest.raises(UndefinedRatioError):
        excess_integral(np.zeros(10), 0.5)
    with pytest.raises(InvalidParameterError):
        excess_integral(np.ones(10), -0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_excess_integral_monotone_convex(seed):
    y = stream(seed).gamma(0.7, size=200)
    xs = np.linspace(0, 3, 31)
    v = np.array([excess_integral(y, x).value for x in xs])
    assert np.all(np.diff(v) <= 1e-12)
    assert np.all(np.diff(v, 2) >= -1e-12)
    assert np.all((v >= 0) & (v <= 1 + 1e-12))


def test_excess_integral_moments_agrees():
    y = stream(5).exponential(size=500)
    xs = (0.3, 1.0)
    sums = {"n": y.size, "sum_y": y.sum(), "sum_yy": (y * y).sum(),
            "a": {}, "aa": {}, "ay": {}}
    for x in xs:
        a = np.clip(y - x, 0, None)
        sums["a"][x], sums["aa"][x], sums["ay"][x] = a.sum(), (a * a).sum(), (a * y).sum()
    for x in xs:
        d = excess_integral(y, x)
        m = excess_integral_moments(sums, x)
        assert m.value == pytest.approx(d.value, rel=1e-12)
        assert m.stderr == pytest.approx(d.stderr, rel=1e-8)
