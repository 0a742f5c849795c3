"""Command-line front end.

    selfsim-extremes {simulate,estimate-p,theta,check-conditions,prop2}
        --config FILE [--seed N] [--workers N] [--out DIR] [--strict]

Configs are sectioned ``key = value`` files. Every run writes the resolved
configuration and the tool version next to its outputs. Exit codes: 0 ok,
1 runtime error, 2 configuration error, 3 failed condition under --strict.
"""
from __future__ import annotations

import argparse
import configparser
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import ThetaEstimate, estimate_theta, theta_case_b
from .conditions import cond_a_probe, cond_b_tail, cond_c_ratio, cond_cstar_ratio
from .errors import ConfigError, InvalidParameterError, SelfSimError
from .functionals import sojourn_times
from .harness import (
    ExperimentSpec,
    band_rows_to_csv,
    convergence_table,
    prop2_bounds_check,
    resolve_workers,
    rows_to_csv,
)
from .kernels import make_kernel
from .pathsim import PathEnsemble, order_statistic
from .streams import stream

SCHEMA_VERSION = "1"

# section -> key -> (type, default)
SCHEMA = {
    "kernel": {"name": (str, "fbm"), "H": (float, None), "h": (float, None), "k": (float, None)},
    "process": {"delta": (float, 0.0), "m": (int, 1), "n": (int, 1), "r": (int, 1)},
    "grid": {"layout": (str, "log-uniform"), "N": (int, 4096), "t_min": (float, 1e-3)},
    "experiment": {"levels": ("floats", "2, 2.5, 3, 3.5, 4"), "T": (float, 1.0),
                   "functional": (str, "sup-probability"), "estimator": (str, "ensemble"),
                   "batches": (int, 16), "batch_size": (int, 4096), "seed": (int, 0),
                   "memory_limit": (float, 2e9)},
    "simulate": {"count": (int, 16)},
    "prediction": {"source": (str, "prop1-tail"), "theta_prime": (float, None),
                   "theta_prime_stderr": (float, 0.0)},
    "theta": {"r": (int, None), "alpha": (float, None), "D": (float, None),
              "kappa": (float, None), "beta4": (float, None),
              "x_grid": ("floats", "0, 0.005, 0.01, 0.015, 0.02, 0.025, 0.1, 0.2, 0.5, 1"),
              "n_draws": (int, 20000), "step": (float, None), "T0": (float, None),
              "refine": (bool, False)},
    "conditions": {"run": ("strs", "A, B"), "levels": ("floats", "3, 4, 5"),
                   "lags": ("floats", "1"), "u": (float, 4.0), "d": (float, 2.0),
                   "a": (float, None), "sigma": (float, 1.0),
                   "t_grid": ("floats", "0.1, 0.2, 0.4, 0.6, 0.8, 1"),
                   "lambda_grid": ("floats", "0.3, 0.5, 0.7, 1"), "v": (float, 0.0),
                   "rho": (float, None), "lambda0": (float, 1.0),
                   "n_samples": (int, 50000)},
    "prop2": {"x_grid": ("floats", "0, 0.2, 0.5, 1")},
}

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_STRICT = 0, 1, 2, 3


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            out[(section, m.group(1).strip())] = i
    return out


def _convert(kind, raw: str, where: str, line):
    try:
        if kind == "floats":
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if kind == "strs":
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r}", line) from None


def load_config(text: str) -> dict:
    """Parse config text into {section: {key: value}} with defaults filled in."""
    lines = _key_lines(text)
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed config: {exc.message.splitlines()[0]}", line) from None
    conf = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((section, None)))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", lines.get((section, key)))
    for section, keys in SCHEMA.items():
        conf[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                conf[section][key] = _convert(kind, parser[section][key], f"[{section}] {key}",
                                              lines.get((section, key)))
            elif default is None:
                conf[section][key] = None
            else:
                conf[section][key] = _convert(kind, str(default), f"[{section}] {key}", None)
    conf["_present"] = set(parser.sections())
    return conf


def dump_config(conf: dict) -> str:
    out = [f"# selfsim-extremes {__version__}, config schema {SCHEMA_VERSION}"]
    for section in SCHEMA:
        out.append(f"[{section}]")
        for key, val in conf[section].items():
            if val is None:
                continue
            if isinstance(val, tuple):
                val = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in val)
            elif isinstance(val, float):
                val = repr(val)
            out.append(f"{key} = {val}")
        out.append("")
    return "\n".join(out)


def spec_from_config(conf: dict) -> ExperimentSpec:
    k, p, g, e = conf["kernel"], conf["process"], conf["grid"], conf["experiment"]
    params = {name: k[name] for name in ("H", "h", "k") if k[name] is not None}
    if k["name"] == "fbm" and not params:
        params = {"H": 0.5}
    try:
        make_kernel(k["name"], **params)
    except InvalidParameterError as exc:
        raise ConfigError(f"[kernel] {exc}") from None
    return ExperimentSpec(
        kernel=k["name"], kernel_params=tuple(params.items()), delta=p["delta"], m=p["m"],
        n=p["n"], r=p["r"], levels=e["levels"], grid_layout=g["layout"], grid_N=g["N"],
        t_min=g["t_min"], T=e["T"], functional=e["functional"], batches=e["batches"],
        batch_size=e["batch_size"], seed=e["seed"], estimator=e["estimator"],
        memory_limit=e["memory_limit"])


def _write(out: Path, name: str, text: str):
    (out / name).write_text(text)


def _write_dat(out: Path, name: str, xs, ys):
    _write(out, name, "".join(f"{x:.10g} {y:.10g}\n" for x, y in zip(xs, ys)))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(conf, out: Path, workers: int, strict: bool) -> int:
    spec = spec_from_config(conf)
    count = conf["simulate"]["count"]
    model, grid = spec.model(), spec.grid()
    vals = model.sample(grid, count * spec.n, stream(spec.seed, 0, "simulate"))
    _write(out, "paths.csv", PathEnsemble(grid, vals).to_text())
    path = order_statistic(vals.reshape(count, spec.n, grid.N), spec.r, axis=1)
    lines = ["path,sup," + ",".join(f"sojourn_u{u:g}" for u in spec.levels)]
    soj = [sojourn_times(path, grid.times, u) for u in spec.unit_levels()]
    for i in range(count):
        lines.append(f"{i},{path[i].max():.10g}," + ",".join(f"{s[i]:.10g}" for s in soj))
    _write(out, "functionals.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def _theta_inputs(conf, spec: ExperimentSpec):
    th = conf["theta"]
    exp = spec.expansion()
    scheme = spec.scheme()
    return dict(r=th["r"] or spec.r,
                alpha=th["alpha"] if th["alpha"] is not None else exp.alpha,
                D=th["D"] if th["D"] is not None else exp.D,
                kappa=th["kappa"] if th["kappa"] is not None else spec.model().kappa,
                beta4=th["beta4"] if th["beta4"] is not None else
                (scheme.beta4 if math.isfinite(scheme.beta4) else 0.0))


def _run_theta(conf, spec, step_scale: float = 1.0) -> ThetaEstimate:
    th = conf["theta"]
    args = _theta_inputs(conf, spec)
    step = th["step"]
    if step_scale != 1.0:
        from .asymptotics import DRIFT_ONLY_STEP, default_theta_step
        base = step if step is not None else (
            DRIFT_ONLY_STEP if args["alpha"] > 1 else default_theta_step(args["alpha"], args["D"]))
        step = base * step_scale
    return estimate_theta(x_grid=th["x_grid"], n_draws=th["n_draws"], seed=spec.seed,
                          step=step, T0=th["T0"], **args)


def cmd_estimate_p(conf, out: Path, workers: int, strict: bool) -> int:
    spec = spec_from_config(conf)
    pred = conf["prediction"]
    source = pred["source"]
    tp, tse = pred["theta_prime"], pred["theta_prime_stderr"]
    if source == "thm4" and tp is None:
        if "theta" not in conf["_present"]:
            raise ConfigError("thm4 needs [prediction] theta_prime or a [theta] section")
        est = _run_theta(conf, spec)
        tp, tse = est.derivative_at_zero, est.derivative_stderr
        if not np.isfinite(tp):
            raise SelfSimError("Theta slope could not be estimated from the [theta] settings")
    rows = convergence_table(spec, source, tp, tse, workers=workers)
    _write(out, "convergence.csv", rows_to_csv(rows))
    us = [r.u for r in rows]
    _write_dat(out, "ratio.dat", us, [r.ratio for r in rows])
    _write_dat(out, "estimate.dat", us, [r.estimate.mean for r in rows])
    _write_dat(out, "prediction.dat", us, [r.prediction for r in rows])
    return EXIT_OK


def _theta_outputs(out: Path, est: ThetaEstimate, alpha: float, suffix: str = ""):
    lines = ["x,theta,stderr" + (",closed_form" if alpha > 1 else "")]
    for x, t, s in zip(est.x_grid, est.theta, est.stderr):
        row = f"{x:.10g},{t:.10g},{s:.10g}"
        if alpha > 1:
            row += f",{theta_case_b(x, est.kappa, est.r):.10g}"
        lines.append(row)
    _write(out, f"theta{suffix}.csv", "\n".join(lines) + "\n")
    _write(out, f"theta_derivative{suffix}.csv", est.derivative_record())
    _write_dat(out, f"theta{suffix}.dat", est.x_grid, est.theta)


def cmd_theta(conf, out: Path, workers: int, strict: bool) -> int:
    spec = spec_from_config(conf)
    xg = conf["theta"]["x_grid"]
    if not xg or xg[0] != 0.0:
        raise ConfigError("[theta] x_grid must start at 0")
    alpha = _theta_inputs(conf, spec)["alpha"]
    est = _run_theta(conf, spec)
    _theta_outputs(out, est, alpha)
    if conf["theta"]["refine"]:
        _theta_outputs(out, _run_theta(conf, spec, 0.5), alpha, "_refined")
    return EXIT_OK


def cmd_check_conditions(conf, out: Path, workers: int, strict: bool) -> int:
    spec = spec_from_config(conf)
    c = conf["conditions"]
    kern = spec.model().kernel
    scheme = spec.scheme()
    exp = spec.expansion()
    beta4 = scheme.beta4 if math.isfinite(scheme.beta4) else 0.0
    reports = []
    for tag in c["run"]:
        if tag == "A":
            rep = cond_a_probe(kern, scheme, c["levels"], c["lags"],
                               (exp.alpha, exp.D, kern.kappa, beta4),
                               n_samples=c["n_samples"], seed=spec.seed,
                               delta=spec.delta, m=spec.m)
        elif tag == "B":
            rep = cond_b_tail(kern, scheme, c["u"], c["d"], n_samples=c["n_samples"],
                              seed=spec.seed, delta=spec.delta, m=spec.m)
        elif tag == "C":
            a = c["a"] if c["a"] is not None else scheme.a_tilde
            rep = cond_c_ratio(kern, scheme, c["u"], a, c["sigma"],
                               n_samples=c["n_samples"], seed=spec.seed)
        elif tag == "C*":
            rep = cond_cstar_ratio(kern, scheme, c["u"], c["t_grid"], c["lambda_grid"],
                                   c["v"], c["rho"], c["lambda0"], n_samples=c["n_samples"],
                                   seed=spec.seed, delta=spec.delta, m=spec.m)
        else:
            raise ConfigError(f"unknown condition {tag!r}; choose from A, B, C, C*")
        reports.append(rep)
        name = tag.replace("*", "star")
        _write(out, f"condition_{name}.csv", rep.to_csv())
    _write(out, "summary.txt", "\n".join(r.summary() for r in reports) + "\n")
    if strict and any(r.verdict == "fail" for r in reports):
        return EXIT_STRICT
    return EXIT_OK


def cmd_prop2(conf, out: Path, workers: int, strict: bool) -> int:
    spec = spec_from_config(conf)
    xs = conf["prop2"]["x_grid"]
    args = _theta_inputs(conf, spec)
    if args["alpha"] > 1:
        theta = ThetaEstimate.from_closed_form(xs, args["kappa"], args["r"])
    else:
        conf = dict(conf, theta=dict(conf["theta"], x_grid=tuple(sorted(set(xs) | {0.0}))))
        theta = _run_theta(conf, spec)
    rows = prop2_bounds_check(spec, xs, theta, workers=workers)
    _write(out, "prop2.csv", band_rows_to_csv(rows))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate-p": cmd_estimate_p, "theta": cmd_theta,
            "check-conditions": cmd_check_conditions, "prop2": cmd_prop2}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selfsim-extremes",
                                description="Extremes of order statistics of self-similar processes.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, help="sectioned key = value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--workers", type=int, help="worker processes (default $ORDSTAT_WORKERS or 1)")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--strict", action="store_true", help="exit 3 when a condition probe fails")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text() if args.config else ""
        conf = load_config(text)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            conf["experiment"]["seed"] = args.seed
        workers = resolve_workers(args.workers)
        spec_from_config(conf)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InvalidParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write(out, "resolved_config.ini", dump_config(conf))
        _write(out, "VERSION", f"selfsim-extremes {__version__}\n")
        code = COMMANDS[args.command](conf, out, workers, args.strict)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SelfSimError, ArithmeticError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
