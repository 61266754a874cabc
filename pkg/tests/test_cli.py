import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from antler.benchmark import BENCHMARK_CONFIG
from antler.cli import RUN_DIR_ENV, run_command
from antler.evaluation import paired_statistics, read_mc_runs

SMALL = """\
schema_version: 1
name: small
system: {process_noise_std: 0.1, horizon: 20}
kernel: {hyperparameters: {signal_variance: 2.0, lengthscale: 1.0}, active_dims: [0]}
law: {name: gp_tracking, param_box: [[-1.0, 2.0], [-1.0, 2.0]], reference: {kind: sine, amplitude: 1.0, period: 20.0}}
saa: {M: 5, M_list: [2, 5], n_starts: 2, max_iter: 30}
evaluation: {true_g: {kind: sine}, n_runs: 6, seed: 3}
"""

DIVERGING = """\
schema_version: 1
system: {process_noise_std: 0.1, horizon: 10, x0: [1.0]}
kernel: {hyperparameters: {signal_variance: 1.0, lengthscale: 1.0}}
law: {name: linear_feedback, param_box: [[-1.0, 2.0]]}
cost: {kind: quadratic, Q: [[1.0]], R: [[0.0]]}
evaluation: {true_g: {kind: linear, gain: 5.0}, n_runs: 4, theta_antler: [0.0]}
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(SMALL)
    return path


def run(*argv):
    return run_command([str(a) for a in argv])


def test_validate(capsys):
    assert run("validate-config", BENCHMARK_CONFIG) == 0
    out = capsys.readouterr().out
    assert "config ok" in out and "prior rows 100" in out


def test_config_error_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.replace("horizon: 20", "horizon: -3"))
    assert run("validate-config", bad) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config" and err["line"] == 3 and err["exit_code"] == 2


def test_missing_file_and_bad_usage(tmp_path, capsys):
    assert run("validate-config", tmp_path / "none.yaml") == 2
    assert run("optimize") == 2
    assert run("frobnicate", tmp_path) == 2


def test_theta_outside_box(small, tmp_path, capsys):
    assert run("evaluate", small, "--run-dir", tmp_path / "e", "--theta", "5", "0") == 2
    assert json.loads(capsys.readouterr().err)["error"] == "invalid_argument"


def test_divergence_exit(tmp_path, capsys):
    path = tmp_path / "div.yaml"
    path.write_text(DIVERGING)
    assert run("evaluate", path, "--run-dir", tmp_path / "d") == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "divergence"
    rows = list(csv.DictReader(open(tmp_path / "d" / "mc_runs.csv")))
    assert all(r["diverged"] == "1" and r["failed_step"] == "8" for r in rows)


def test_train_gp(tmp_path):
    assert run("train-gp", BENCHMARK_CONFIG, "--run-dir", tmp_path) == 0
    payload = json.loads((tmp_path / "kernel.json").read_text())
    k = payload["kernels"][0]["kernel"]
    assert payload["config_hash"].startswith("9d1c5b499f80")
    assert k["signal_variance"] == pytest.approx(4.71, abs=0.01)


def test_optimize_is_byte_reproducible(small, tmp_path):
    for name in ("a", "b"):
        assert run("optimize", small, "--run-dir", tmp_path / name) == 0
    for f in ("optimize.json", "trajectories.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    payload = json.loads((tmp_path / "a" / "optimize.json").read_text())
    theta = np.array(payload["result"]["theta_star"])
    assert np.all(theta >= -1) and np.all(theta <= 2)
    assert payload["seeds"]["saa_seed"] == 0


def test_study_rows(small, tmp_path):
    assert run("study", small, "--run-dir", tmp_path, "--timing") == 0
    rows = list(csv.DictReader(open(tmp_path / "study.csv")))
    assert [int(r["M"]) for r in rows] == [2, 5]
    assert "wall_time_s" in rows[0]
    study = json.loads((tmp_path / "study.json").read_text())
    for row in study["rows"]:
        assert len(row["starts"]) == 2
        for start in row["starts"]:
            assert np.all(np.diff(start["cost_history"]) <= 0)


def test_evaluate_and_compare(small, tmp_path):
    assert run("evaluate", small, "--run-dir", tmp_path / "e", "--theta", "1.0", "1.0") == 0
    summary = json.loads((tmp_path / "e" / "mc_summary.json").read_text())["summary"]
    costs = read_mc_runs(tmp_path / "e" / "mc_runs.csv")["antler"]
    assert summary["runs"] == 6 and summary["mean_total_cost"] == pytest.approx(costs.mean(), rel=1e-12)

    assert run("compare", small, "--run-dir", tmp_path / "c") == 0
    payload = json.loads((tmp_path / "c" / "mc_summary.json").read_text())
    arms = read_mc_runs(tmp_path / "c" / "mc_runs.csv")
    n, diff, se = paired_statistics(arms["antler"], arms["baseline"])
    cmp = payload["comparison"]
    assert n == cmp["n_pairs"] == 6
    assert diff == pytest.approx(cmp["mean_difference"], rel=1e-12, abs=1e-12)
    assert se == pytest.approx(cmp["paired_se"], rel=1e-12, abs=1e-12)
    assert set(payload["designs"]) == {"antler", "baseline"}


def test_run_dir_from_environment(small, tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_DIR_ENV, str(tmp_path / "base"))
    assert run("train-gp", small) == 0
    (made,) = (tmp_path / "base").iterdir()
    assert (made / "kernel.json").exists()
    assert made.name.endswith(json.loads((made / "kernel.json").read_text())["config_hash"][:12])


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "antler.cli", "validate-config", str(BENCHMARK_CONFIG)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "config ok" in proc.stdout
