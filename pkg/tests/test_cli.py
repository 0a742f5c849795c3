import subprocess
import sys

import pytest

from selfsim_extremes import __version__
from selfsim_extremes.cli import dump_config, load_config, main
from selfsim_extremes.errors import ConfigError
from selfsim_extremes.harness import CSV_COLUMNS

BASE = """\
[kernel]
name = fbm
H = 0.5
[experiment]
levels = 2, 3
batches = 2
batch_size = 256
[grid]
N = 128
[simulate]
count = 4
"""


def _run(tmp_path, command, text, *extra, name="run"):
    cfg = tmp_path / f"{name}.ini"
    cfg.write_text(text)
    out = tmp_path / name
    code = main([command, "--config", str(cfg), "--out", str(out), *extra])
    return code, out


# --- config ------------------------------------------------------------------

def test_unknown_key_is_line_anchored():
    with pytest.raises(ConfigError, match=r"line 3: unknown key 'kernal'"):
        load_config("[kernel]\nname = fbm\nkernal = 1\n")


def test_unknown_section_and_bad_value():
    with pytest.raises(ConfigError, match="unknown section"):
        load_config("[kernels]\nname = fbm\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_config("[grid]\nN = many\n")


def test_defaults_and_round_trip():
    conf = load_config("")
    assert conf["experiment"]["levels"] == (2.0, 2.5, 3.0, 3.5, 4.0)
    assert conf["conditions"]["run"] == ("A", "B")
    again = load_config(dump_config(conf))
    for section in ("kernel", "process", "grid", "experiment", "conditions"):
        assert again[section] == conf[section]


# --- simulate ----------------------------------------------------------------

def test_simulate_minimal(tmp_path):
    code, out = _run(tmp_path, "simulate", BASE)
    assert code == 0
    assert (out / "paths.csv").read_text().count("\n") == 5
    head = (out / "functionals.csv").read_text().splitlines()[0]
    assert head == "path,sup,sojourn_u2,sojourn_u3"
    assert "[experiment]" in (out / "resolved_config.ini").read_text()
    assert __version__ in (out / "VERSION").read_text()


def test_simulate_deterministic(tmp_path):
    _, a = _run(tmp_path, "simulate", BASE, name="a")
    _, b = _run(tmp_path, "simulate", BASE, name="b")
    for f in ("paths.csv", "functionals.csv", "resolved_config.ini"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_unknown_key_exit_code(tmp_path, capsys):
    code, _ = _run(tmp_path, "simulate", "[kernel]\nname = fbm\nkernal = 1\n")
    assert code == 2
    assert "kernal" in capsys.readouterr().err


def test_invalid_kernel_parameter_exit_code(tmp_path):
    code, _ = _run(tmp_path, "simulate", "[kernel]\nname = fbm\nH = 1.5\n")
    assert code == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    text = BASE.replace("batches = 2", "batches = 2\nmemory_limit = 1000") \
        + "[prediction]\nsource = thm3\n"
    code, _ = _run(tmp_path, "estimate-p", text)
    assert code == 1
    assert "GB" in capsys.readouterr().err


# --- estimate-p --------------------------------------------------------------

def test_prop1_zero_budget(tmp_path):
    text = BASE.replace("batches = 2", "batches = 0") + "[prediction]\nsource = prop1-tail\n"
    code, out = _run(tmp_path, "estimate-p", text)
    assert code == 0
    lines = (out / "convergence.csv").read_text().splitlines()
    assert tuple(lines[0].split(",")) == CSV_COLUMNS
    assert len(lines) == 3


def test_golden_columns_and_plot_files(tmp_path):
    code, out = _run(tmp_path, "estimate-p", BASE + "[prediction]\nsource = thm3\n")
    assert code == 0
    header = (out / "convergence.csv").read_text().splitlines()[0]
    assert header == "u,estimate,stderr,prediction,ratio,ratio_err,n_samples,grid_N,seed"
    for f in ("ratio.dat", "estimate.dat", "prediction.dat"):
        rows = (out / f).read_text().splitlines()
        assert len(rows) == 2 and all(len(r.split()) == 2 for r in rows)


def test_thm4_without_theta_exit_2(tmp_path):
    code, _ = _run(tmp_path, "estimate-p", BASE + "[prediction]\nsource = thm4\n")
    assert code == 2


def test_thm4_with_theta_prime(tmp_path):
    text = BASE + "[prediction]\nsource = thm4\ntheta_prime = 1.0\n"
    code, out = _run(tmp_path, "estimate-p", text)
    assert code == 0


def test_thm4_from_theta_section(tmp_path):
    text = BASE.replace("H = 0.5", "H = 0.75") + "[prediction]\nsource = thm4\n" \
        "[theta]\nn_draws = 20000\nx_grid = 0, 0.05, 0.1, 0.15, 0.2, 0.5\n"
    code, out = _run(tmp_path, "estimate-p", text)
    assert code == 0


def test_workers_flag_stable_csv(tmp_path):
    text = BASE + "[prediction]\nsource = thm3\n"
    _, a = _run(tmp_path, "estimate-p", text, "--workers", "1", name="w1")
    _, b = _run(tmp_path, "estimate-p", text, "--workers", "4", name="w4")
    assert (a / "convergence.csv").read_bytes() == (b / "convergence.csv").read_bytes()


def test_seed_flag_overrides(tmp_path):
    text = BASE + "[prediction]\nsource = thm3\n"
    _, out = _run(tmp_path, "estimate-p", text, "--seed", "42")
    assert "seed = 42" in (out / "resolved_config.ini").read_text()
    assert (out / "convergence.csv").read_text().splitlines()[1].endswith(",42")


# --- theta -------------------------------------------------------------------

THETA = BASE.replace("H = 0.5", "H = 0.75") + "[theta]\nn_draws = 5000\nx_grid = 0, 0.2, 0.5, 1\n"


def test_theta_case_b_closed_form_column(tmp_path):
    code, out = _run(tmp_path, "theta", THETA)
    assert code == 0
    lines = (out / "theta.csv").read_text().splitlines()
    assert lines[0] == "x,theta,stderr,closed_form"
    assert lines[1].startswith("0,1,0,1")
    assert (out / "theta_derivative.csv").exists()


def test_theta_refine_suffix(tmp_path):
    code, out = _run(tmp_path, "theta", THETA + "refine = true\n")
    assert code == 0
    assert (out / "theta_refined.csv").exists()
    assert (out / "theta_derivative_refined.csv").exists()


def test_theta_grid_must_start_at_zero(tmp_path):
    code, _ = _run(tmp_path, "theta", THETA.replace("x_grid = 0, 0.2", "x_grid = 0.1, 0.2"))
    assert code == 2


# --- check-conditions --------------------------------------------------------

COND = BASE + "[conditions]\nn_samples = 20000\n"


def test_conditions_default_a_and_b(tmp_path):
    code, out = _run(tmp_path, "check-conditions", COND)
    assert code == 0
    assert (out / "condition_A.csv").exists() and (out / "condition_B.csv").exists()
    assert not (out / "condition_C.csv").exists()
    summary = (out / "summary.txt").read_text()
    assert sum(line.startswith("condition ") for line in summary.splitlines()) == 2


def test_conditions_strict_exit_3(tmp_path):
    # with 200000 samples the Brownian gap at u = 5 is far outside the pass band
    text = COND.replace("n_samples = 20000", "n_samples = 200000") + "run = A\n"
    code, out = _run(tmp_path, "check-conditions", text, "--strict")
    assert "condition A: fail" in (out / "summary.txt").read_text()
    assert code == 3
    code, _ = _run(tmp_path, "check-conditions", text, name="lenient")
    assert code == 0


def test_conditions_selectable(tmp_path):
    text = COND + "run = C, C*\nu = 3\nsigma = 0.05\n"
    code, out = _run(tmp_path, "check-conditions", text)
    assert code == 0
    assert (out / "condition_C.csv").exists() and (out / "condition_Cstar.csv").exists()
    code, _ = _run(tmp_path, "check-conditions", COND + "run = Z\n", name="bad")
    assert code == 2


# --- prop2 -------------------------------------------------------------------

def test_prop2_command(tmp_path):
    text = THETA + "[prop2]\nx_grid = 0, 0.5\n"
    text = text.replace("batches = 2", "batches = 2\nestimator = size-biased")
    code, out = _run(tmp_path, "prop2", text)
    assert code == 0
    lines = (out / "prop2.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 2


def test_console_entry_point(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(BASE)
    res = subprocess.run([sys.executable, "-m", "selfsim_extremes.cli", "simulate",
                          "--config", str(cfg), "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
