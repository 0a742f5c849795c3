"""Exit criteria at their stated tolerances. Each test records one verdict
line; the lines are repeated in the terminal summary."""
import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from selfsim_extremes.asymptotics import (
    ThetaEstimate,
    estimate_theta,
    mean_sojourn_asymptotic,
    mean_sojourn_exact,
    order_tail_asymptotic,
    order_tail_exact,
    p_prediction_thm4,
    theta_case_b,
)
from selfsim_extremes.conditions import cond_a_probe, cond_b_tail, cond_c_ratio, cond_cstar_ratio
from selfsim_extremes.harness import (
    ExperimentSpec,
    band_rows_to_csv,
    convergence_table,
    prop2_bounds_check,
    rows_to_csv,
    run_experiment,
)
from selfsim_extremes.kernels import (
    StationaryKernel,
    bifbm_kernel,
    check_self_similarity,
    fbm_kernel,
    gaussian_marginal,
    local_expansion,
    scaling_scheme_for,
    skew_marginal,
    subfbm_kernel,
)
from selfsim_extremes.pathsim import ProcessModel, GridSpec
from selfsim_extremes.streams import stream

pytestmark = pytest.mark.acceptance

G = gaussian_marginal()
BM = fbm_kernel(0.5)
BM_SCHEME = scaling_scheme_for(1.0, 0.5)

# fine lattice for the slope of Theta at zero in the Brownian limit
THETA_STEP = 0.0005
THETA_DRAWS = 40_000
THETA_X = np.concatenate([[0.0], THETA_STEP * np.arange(1, 11) * 5, [0.2, 0.5, 1.0]])


def _brownian_theta(r):
    return estimate_theta(r, 1.0, 0.5, 0.5, 1.0, THETA_X, n_draws=THETA_DRAWS, seed=2024,
                          step=THETA_STEP)


def _approaches_one(ratios, errs=None):
    """|ratio - 1| non-increasing along the level grid (within 2 stderr) and
    strictly smaller at the top than at the bottom."""
    d = np.abs(np.asarray(ratios) - 1.0)
    e = np.zeros_like(d) if errs is None else np.asarray(errs)
    steps = all(d[i + 1] <= d[i] + 2 * math.hypot(e[i], e[i + 1]) for i in range(d.size - 1))
    return steps and d[-1] < d[0]


def test_order_tail_ratio(verdict):
    t0 = time.perf_counter()
    u_star = G.isf(1e-4)
    gbars = 10.0 ** -np.arange(2, 9)
    us = [G.isf(g) for g in gbars]
    ok, worst = True, 1.0
    for n in range(1, 6):
        for r in range(1, n + 1):
            ex = order_tail_exact(u_star, n, r, G)
            asy = order_tail_asymptotic(u_star, n, r, G)[0]
            ratio = ex / asy
            worst = min(worst, ratio)
            ok &= 0.995 <= ratio <= 1.0 + 1e-12
            seq = [order_tail_exact(u, n, r, G) / order_tail_asymptotic(u, n, r, G)[0] for u in us]
            ok &= all(b >= a - 1e-12 for a, b in zip(seq[:-1], seq[1:]))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    assert verdict(1, ok, f"smallest ratio at G=1e-4: {worst:.6f}; {elapsed:.2f}s")


def test_mean_sojourn_ratio(verdict):
    t0 = time.perf_counter()
    lines, ok = [], True
    for name, kappa, alpha in (("brownian", 0.5, 1.0), ("fbm(0.75)", 0.75, 1.5)):
        scheme = scaling_scheme_for(alpha, kappa)
        for r in (1, 2):
            ratios = [mean_sojourn_exact(u, r, r, G, kappa)
                      / mean_sojourn_asymptotic(u, r, r, G, kappa, scheme) for u in (2, 3, 4, 5)]
            good = 0.85 <= ratios[2] <= 1.15 and _approaches_one(ratios)
            ok &= good
            lines.append(f"{name} r={r}: " + " ".join(f"{x:.3f}" for x in ratios)
                         + ("" if good else " (out of band)"))
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    assert verdict(2, ok, "; ".join(lines) + f"; {elapsed:.1f}s")


def test_drift_only_theta(verdict):
    t0 = time.perf_counter()
    ok, worst_z, worst_rel = True, 0.0, 0.0
    for kappa in (0.25, 0.5):
        for r in (1, 2, 3):
            mean = 1.0 / (kappa * r)
            x = np.unique(np.concatenate([[0.0], mean * np.array([0.05, 0.1, 0.2, 0.3, 0.45]),
                                          [0.2, 0.5, 1.0]]))
            est = estimate_theta(r, 1.5, 0.5, kappa, 1.0, x, n_draws=1_000_000, seed=5)
            for xv in (0.2, 0.5, 1.0):
                th, se = est.at(xv)
                z = abs(th - theta_case_b(xv, kappa, r)) / se
                worst_z = max(worst_z, z)
                ok &= z <= 3
            rel = abs(est.derivative_at_zero / (kappa * r) - 1)
            worst_rel = max(worst_rel, rel)
            ok &= rel <= 0.02
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    assert verdict(3, ok, f"max |z| {worst_z:.2f}, max slope error {100 * worst_rel:.2f}%; "
                          f"{elapsed:.0f}s")


def test_brownian_end_to_end(verdict):
    t0 = time.perf_counter()
    theta = _brownian_theta(1)
    tp, tse = theta.derivative_at_zero, theta.derivative_stderr
    levels = (2.5, 3.0, 3.5, 4.0)
    spec = ExperimentSpec(levels=levels, grid_layout="log-uniform", grid_N=8192,
                          batches=489, batch_size=2048, seed=4)
    rows = convergence_table(spec, "thm4", theta_prime=tp, theta_prime_stderr=tse)
    mc = [r.ratio for r in rows]
    mc_err = [r.ratio_err for r in rows]
    exact = [2 * stats.norm.sf(u) / r.prediction for u, r in zip(levels, rows)]
    exact_err = [e * tse / tp for e in exact]
    ok_mc = 0.85 <= mc[-1] <= 1.15 and _approaches_one(mc, mc_err)
    ok_exact = 0.85 <= exact[-1] <= 1.15 and _approaches_one(exact, exact_err)
    elapsed = time.perf_counter() - t0
    detail = (f"theta'={tp:.3f}+-{tse:.3f}; MC ratio " + " ".join(f"{x:.3f}" for x in mc)
              + f" (u=4 +-{mc_err[-1]:.3f}); exact ratio " + " ".join(f"{x:.3f}" for x in exact)
              + f"; {rows[0].n_samples} paths; {elapsed / 60:.1f} min")
    assert verdict(4, ok_mc and ok_exact and elapsed < 1800, detail)


def test_pair_minimum_consistency(verdict):
    t0 = time.perf_counter()
    theta = _brownian_theta(2)
    tp, tse = theta.derivative_at_zero, theta.derivative_stderr
    spec = ExperimentSpec(n=2, r=2, levels=(3.0,), grid_layout="log-uniform", grid_N=8192,
                          batches=16, batch_size=2048, seed=5, estimator="size-biased")
    p = run_experiment(spec).levels[0].p
    pred = p_prediction_thm4(3.0, 2, 2, G, 0.5, BM_SCHEME, tp, tse)
    allowance = 3 * math.hypot(p.stderr, pred.stderr) + 0.15 * pred.value
    agree = abs(p.mean - pred.value) <= allowance
    endpoint = order_tail_exact(3.0, 2, 2, G)
    above = p.mean / endpoint > 1 and p.mean - endpoint > 3 * p.stderr
    elapsed = time.perf_counter() - t0
    detail = (f"p2(3)={p.mean:.4g}+-{p.stderr:.2g}, prediction={pred.value:.4g}"
              f" (theta'={tp:.3f}+-{tse:.3f}), allowance {allowance:.3g}; "
              f"p2/G2={p.mean / endpoint:.3f}; {elapsed:.0f}s")
    assert verdict(5, agree and above and elapsed < 1800, detail)


def test_excess_integral_band(verdict):
    t0 = time.perf_counter()
    xs = (0.2, 0.5, 1.0)
    spec = ExperimentSpec(kernel="fbm", kernel_params=(("H", 0.75),), levels=(4.0,),
                          grid_layout="log-uniform", grid_N=8192, batches=16, batch_size=2048,
                          seed=6, estimator="size-biased")
    theta = ThetaEstimate.from_closed_form(xs, 0.75, 1)
    rows = prop2_bounds_check(spec, xs, theta)
    elapsed = time.perf_counter() - t0
    ok = all(r.inside for r in rows) and elapsed < 1200
    detail = "; ".join(f"x={r.x:g}: {r.excess:.4f}+-{r.excess_stderr:.4f} vs {r.theta:.4f}"
                       for r in rows)
    assert verdict(6, ok, detail + f"; {elapsed:.0f}s")


def test_kernel_unit_suite(verdict):
    t0 = time.perf_counter()
    checks = {}
    kernels = {"fbm": fbm_kernel(0.3), "bifbm": bifbm_kernel(0.6, 0.7),
               "subfbm": subfbm_kernel(0.7)}
    t = np.geomspace(1e-3, 1, 200)
    checks["psd"] = all(np.linalg.eigvalsh(k.gram(t)).min() >= -1e-10 for k in kernels.values())
    checks["self-similar"] = all(check_self_similarity(k, (0.3, 2.0, 7.5)) <= 1e-10
                                 for k in kernels.values())
    stat_ok = True
    for k in kernels.values():
        st = StationaryKernel(k.standardized())
        for tau in (0.1, 0.7, 2.0):
            vals = [st.at_base(tau, b) for b in (-5.0, -1.0, 0.0)]
            stat_ok &= max(vals) - min(vals) <= 1e-9
    checks["lamperti"] = stat_ok
    exp_ok = True
    expected = {"fbm": (0.5, 0.6), "bifbm": (2 ** -0.7, 0.84),
                "subfbm": (1 / (2 * (2 - 2 ** 0.4)), 1.4)}
    for name, k in kernels.items():
        e = local_expansion(k)
        D, a = expected[name]
        exp_ok &= abs(e.D / D - 1) <= 0.01 and abs(e.alpha / a - 1) <= 0.01
    checks["expansion"] = exp_ok
    marg = skew_marginal(0.5, 2)
    hits, n = 0, 0
    model = ProcessModel(BM, 0.5, 2)
    for b in range(10):
        x = model.sample(GridSpec([1.0]), 1_000_000, stream(99, b, "accept-skew"))
        hits += int(np.count_nonzero(x[:, 0] > 3.0))
        n += x.shape[0]
    ph = hits / n
    checks["skew"] = abs(ph - marg.tail(3.0)) <= 3 * math.sqrt(ph * (1 - ph) / n)
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 300
    failed = [k for k, v in checks.items() if not v]
    assert verdict(7, ok, (f"failed: {failed}; " if failed else "")
                   + f"skew tail {ph:.4g} vs {float(marg.tail(3.0)):.4g}; {elapsed:.0f}s")


def test_condition_trends(verdict):
    t0 = time.perf_counter()
    a = cond_a_probe(BM, BM_SCHEME, [3.0, 4.0, 5.0], [1.0], (1.0, 0.5, 0.5, 1.0),
                     n_samples=200_000, seed=8)
    gap, gse = np.abs(a.column("gap")), a.column("joint_stderr")
    ok_a = all(gap[i + 1] < gap[i] - 3 * math.hypot(gse[i], gse[i + 1]) for i in range(2))
    b = cond_b_tail(BM, BM_SCHEME, 4.0, 4.0, n_samples=100_000, seed=8, multiples=(1, 2, 4))
    bv, bse = b.column("observed"), b.column("observed_stderr")
    ok_b = all(bv[i + 1] < bv[i] + 3 * math.hypot(bse[i], bse[i + 1]) for i in range(2)) \
        and bv[-1] < bv[0]
    c = cond_c_ratio(BM, BM_SCHEME, 3.0, 0.5, 0.05, n_samples=200_000, seed=8)
    cv, cse = c.column("observed"), c.column("observed_stderr")
    ok_c = c.verdict == "pass" and cv[-1] < cv[0]
    cs = cond_cstar_ratio(BM, BM_SCHEME, 4.0, [0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
                          [0.3, 0.5, 0.7, 1.0, 1.5, 2.0])
    ok_cs = cs.fit["d"] - 3 * cs.fit["d_stderr"] > 1
    elapsed = time.perf_counter() - t0
    detail = (f"A gaps {' '.join(f'{g:.4f}' for g in gap)}; B {' '.join(f'{v:.4g}' for v in bv)};"
              f" C {' '.join(f'{v:.4f}' for v in cv)}; C* d={cs.fit['d']:.2f}"
              f"+-{cs.fit['d_stderr']:.2f}; {elapsed:.0f}s")
    assert verdict(8, ok_a and ok_b and ok_c and ok_cs and elapsed < 1800, detail)


def test_determinism(verdict, tmp_path):
    base = ExperimentSpec(n=2, r=2, levels=(1.5, 2.5), grid_N=512, batches=8, batch_size=512,
                          seed=9)
    outputs = {}
    for est in ("ensemble", "pooled", "size-biased"):
        spec = replace(base, estimator=est)
        runs = [rows_to_csv(convergence_table(spec, "thm3", workers=w)) for w in (1, 1, 4, 16)]
        outputs[est] = len(set(runs)) == 1
    band = replace(base, n=1, r=1, kernel_params=(("H", 0.75),), estimator="size-biased")
    theta = ThetaEstimate.from_closed_form((0.2, 0.5), 0.75, 1)
    runs = [band_rows_to_csv(prop2_bounds_check(band, (0.2, 0.5), theta, workers=w))
            for w in (1, 4, 16)]
    outputs["prop2"] = len(set(runs)) == 1
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nlevels = 1.5, 2\nbatches = 6\nbatch_size = 256\n"
                   "[grid]\nN = 256\n[prediction]\nsource = thm3\n")
    files = []
    for w in (1, 4, 16):
        out = tmp_path / f"w{w}"
        res = subprocess.run([sys.executable, "-m", "selfsim_extremes.cli", "estimate-p",
                              "--config", str(cfg), "--out", str(out), "--workers", str(w)],
                             capture_output=True)
        assert res.returncode == 0
        files.append(tuple((out / f).read_bytes() for f in
                           ("convergence.csv", "ratio.dat", "estimate.dat", "resolved_config.ini")))
    outputs["cli"] = len(set(files)) == 1
    ok = all(outputs.values())
    assert verdict(9, ok, " ".join(f"{k}={'same' if v else 'DIFFERENT'}"
                                   for k, v in outputs.items()))
