"""Acceptance criteria 1-10 at their stated tolerances.

Each test records ``criterion N: PASS|FAIL ...`` for the session summary.
Criteria 7-10 drive the command line on the bundled benchmark config and
take about half an hour together.
"""

import json
import math
import time
from contextlib import contextmanager
from itertools import combinations

import numpy as np
import pytest
from numpy.polynomial import Polynomial
from scipy.optimize import minimize_scalar

from antler.benchmark import BENCHMARK_CONFIG
from antler.cli import run_command
from antler.control_laws import linear_feedback
from antler.gp_core import KernelSpec, condition, condition_append, empty_gp, posterior, predict
from antler.saa_optimizer import QuadraticCost, SaaProblem, antler_optimize, saa_cost, saa_cost_gradient
from antler.world_model import RolloutDraws, SystemSpec, additive_input, one_step_sample

UNIT = KernelSpec(1.0, 1.0)


@contextmanager
def criterion(report, n, title):
    """Record PASS with the collected details, or FAIL with the first error line."""
    details = []
    t0 = time.perf_counter()
    try:
        yield details
    except BaseException as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        report(f"criterion {n}: FAIL {title}: {msg} [{time.perf_counter() - t0:.1f} s]")
        raise
    report(f"criterion {n}: PASS {title}: {'; '.join(details)} [{time.perf_counter() - t0:.1f} s]")


def check(cond, message):
    assert cond, message


# ---------------------------------------------------------------------------
# GP core and sequential sampling


def test_criterion_1_interpolation(report):
    with criterion(report, 1, "GP interpolation") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        X = rng.uniform(-5, 5, size=(30, 1))
        y = np.sin(X[:, 0])
        mean, var = predict(condition(UNIT, X, y), X)
        err = np.max(np.abs(mean - y))
        check(err <= 1e-10 and np.max(var) <= 1e-10, f"interpolation error {err:.2e}, variance {np.max(var):.2e}")
        p = posterior(condition(UNIT, [[0.0]], [1.0]), [1.0])
        check(abs(p.mean - math.exp(-0.5)) <= 1e-9, f"mean {p.mean!r}")
        check(abs(p.variance - (1 - math.exp(-1))) <= 1e-9, f"variance {p.variance!r}")
        elapsed = time.perf_counter() - t0
        check(elapsed < 1.0, f"took {elapsed:.2f} s")
        d.append(f"max err {err:.1e}, one-point posterior ({p.mean:.5f}, {p.variance:.5f})")


def test_criterion_2_incremental_equals_batch(report):
    with criterion(report, 2, "150 appends vs batch") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        X = rng.uniform(-10, 10, size=(150, 1))
        gp = empty_gp(UNIT, 1)
        for xi in X:
            p = posterior(gp, xi)
            gp = condition_append(gp, xi, p.mean + math.sqrt(p.variance) * rng.normal())
        batch = condition(UNIT, X, gp.targets)
        Q = rng.uniform(-10, 10, size=(20, 1))
        (m1, v1), (m2, v2) = predict(gp, Q), predict(batch, Q)
        err = max(np.max(np.abs(m1 - m2)), np.max(np.abs(v1 - v2)))
        check(err <= 1e-8, f"max difference {err:.2e}")
        elapsed = time.perf_counter() - t0
        check(elapsed < 5.0, f"took {elapsed:.2f} s")
        d.append(f"max difference {err:.1e}")


def test_criterion_3_sequential_draws_match_joint(report):
    with criterion(report, 3, "sequential two-point draws vs N(0, K)") as d:
        t0 = time.perf_counter()
        spec = SystemSpec(1, 1, lambda x, u: np.zeros_like(x), 0.0, KernelSpec(1.0, 1.0, (0,)), 2)
        (gp0,) = spec.world_gps()
        z1, z2 = np.array([0.0, 0.0]), np.array([0.8, 0.0])
        K = spec.kernel[0].gram(np.vstack([z1, z2]))
        n = 100_000
        zeta = np.random.default_rng(3).standard_normal((n, 2))
        G = np.empty((n, 2))
        for i in range(n):
            _, g1 = one_step_sample([gp0], spec, z1, zeta[i, :1], [0.0])
            _, g2 = one_step_sample([condition_append(gp0, z1, g1[0])], spec, z2, zeta[i, 1:], [0.0])
            G[i] = g1[0], g2[0]
        mean_err = np.max(np.abs(G.mean(axis=0)))
        cov_err = np.max(np.abs(np.cov(G.T) - K))
        check(mean_err <= 0.02, f"mean error {mean_err:.4f}")
        check(cov_err <= 0.05, f"covariance error {cov_err:.4f}")
        elapsed = time.perf_counter() - t0
        check(elapsed < 30.0, f"took {elapsed:.1f} s")
        d.append(f"mean err {mean_err:.4f}, cov err {cov_err:.4f}")


def test_criterion_4_revisit_invariance(report):
    with criterion(report, 4, "revisit is zeta-invariant") as d:
        spec = SystemSpec(1, 1, additive_input, 0.0, KernelSpec(4.7113, 1.2942, (0,)), 40)
        rng = np.random.default_rng(4)
        gps = spec.world_gps()
        visited = []
        for x in rng.uniform(-3, 3, 40):
            z = np.array([x, -x])
            _, g = one_step_sample(gps, spec, z, rng.standard_normal(1), [0.0])
            gps = [condition_append(gp, z, g[0]) for gp in gps]
            visited.append((z, g[0]))
        worst = 0.0
        for z, g in visited:
            for zeta in (-5.0, 0.0, 5.0):
                _, again = one_step_sample(gps, spec, z, [zeta], [0.0])
                worst = max(worst, abs(again[0] - g))
        check(worst <= 1e-6, f"revisit moved by {worst:.2e}")
        d.append(f"max deviation {worst:.1e} over 40 points")


# ---------------------------------------------------------------------------
# SAA objective and optimiser


def test_criterion_5_deterministic_polynomial(report):
    # x+ = x + u, u = -theta x, c_t = x^2 + r u^2, so C(theta) = (1 + r theta^2) sum_t (1 - theta)^(2t)
    with criterion(report, 5, "deterministic linear/quadratic case") as d:
        N, r = 4, 0.5
        a = Polynomial([1.0, -1.0])
        poly = Polynomial([1.0, 0.0, r]) * sum((a ** 2) ** t for t in range(N + 1))
        dpoly = poly.deriv()
        spec = SystemSpec(1, 1, additive_input, 0.0, KernelSpec(0.0, 1.0), N)
        problem = SaaProblem(spec, linear_feedback(1, 1, [(-1.0, 2.0)]), QuadraticCost([[1.0]], [[r]]), [1.0],
                             RolloutDraws.generate(3, N, 1, 0))
        cost_err = max(abs(saa_cost(problem, [t]) - poly(t)) for t in np.linspace(-1, 2, 13))
        check(cost_err <= 1e-10, f"cost error {cost_err:.2e}")
        grad_err = max(abs(saa_cost_gradient(problem, [t])[0] - dpoly(t)) / abs(dpoly(t))
                       for t in (-0.7, 0.2, 0.55, 1.4, 1.9))
        check(grad_err <= 1e-5, f"relative gradient error {grad_err:.2e}")
        opt = minimize_scalar(poly, bounds=(-1, 2), method="bounded", options={"xatol": 1e-12})
        res = antler_optimize(problem, n_starts=4, seed=0, tol_theta=1e-9, tol_cost=1e-14)
        theta_err = abs(res.theta_star[0] - opt.x)
        check(theta_err <= 1e-4, f"optimum {res.theta_star[0]:.6f} vs {opt.x:.6f}")
        d.append(f"cost err {cost_err:.1e}, grad rel err {grad_err:.1e}, theta err {theta_err:.1e}")


def linear_gaussian_cost(theta, x0, sigma, N, r):
    a2 = (1 - theta) ** 2
    second = [a2 ** t * x0 ** 2 + sigma ** 2 * sum(a2 ** k for k in range(t)) for t in range(N + 1)]
    return (1 + r * theta ** 2) * sum(second)


def test_criterion_6_linear_gaussian_closed_form(report):
    with criterion(report, 6, "linear-Gaussian closed form at M = 1e4") as d:
        t0 = time.perf_counter()
        x0, sigma, N, r = 1.0, 0.5, 10, 0.5
        exact = minimize_scalar(lambda t: linear_gaussian_cost(t, x0, sigma, N, r), bounds=(0, 2),
                                method="bounded", options={"xatol": 1e-12})
        spec = SystemSpec(1, 1, additive_input, sigma, KernelSpec(0.0, 1.0), N)
        problem = SaaProblem(spec, linear_feedback(1, 1, [(0.0, 2.0)]), QuadraticCost([[1.0]], [[r]]), [x0],
                             RolloutDraws.generate(10_000, N, 1, 6))
        res = antler_optimize(problem, n_starts=3, seed=0)
        rel = abs(res.cost_star - exact.fun) / exact.fun
        dist = abs(res.theta_star[0] - exact.x)
        check(rel <= 0.02, f"cost {res.cost_star:.5f} vs {exact.fun:.5f}")
        check(dist <= 0.05, f"theta {res.theta_star[0]:.5f} vs {exact.x:.5f}")
        elapsed = time.perf_counter() - t0
        check(elapsed < 300, f"took {elapsed:.0f} s")
        d.append(f"C* {exact.fun:.4f} vs {res.cost_star:.4f} ({100 * rel:.2f}%), "
                 f"theta* {exact.x:.4f} vs {res.theta_star[0]:.4f}")


# ---------------------------------------------------------------------------
# benchmark through the command line


def cli(*argv):
    code = run_command([str(a) for a in argv])
    assert code == 0, f"antler {argv[0]} exited with {code}"


@pytest.fixture(scope="module")
def study_runs(tmp_path_factory):
    """The bundled study run twice, with the first run's wall time."""
    base = tmp_path_factory.mktemp("study")
    t0 = time.perf_counter()
    cli("study", BENCHMARK_CONFIG, "--run-dir", base / "a")
    elapsed = time.perf_counter() - t0
    cli("study", BENCHMARK_CONFIG, "--run-dir", base / "b")
    return base / "a", base / "b", elapsed


@pytest.fixture(scope="module")
def optimize_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("optimize")
    for name in ("a", "b"):
        cli("optimize", BENCHMARK_CONFIG, "--run-dir", base / name)
    return base / "a", base / "b"


@pytest.mark.slow
def test_criterion_7_convergence_study(report, study_runs):
    with criterion(report, 7, "benchmark convergence study") as d:
        run_a, _, elapsed = study_runs
        rows = json.loads((run_a / "study.json").read_text())["rows"]
        check([r["M"] for r in rows] == [2, 10, 50, 100, 200], "unexpected M list")
        tail = [np.array(r["theta"]) for r in rows[-3:]]
        spread = max(np.linalg.norm(a - b) for a, b in combinations(tail, 2))
        check(spread <= 0.1, f"theta spread {spread:.4f} over M = 50, 100, 200")
        check(elapsed < 1800, f"study took {elapsed:.0f} s")
        d.append("theta " + ", ".join(f"M={r['M']}: {np.round(r['theta'], 4).tolist()}" for r in rows))
        d.append(f"spread {spread:.4f}, study {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_8_compare_laws(report, tmp_path):
    with criterion(report, 8, "anticipating vs baseline, 100 paired runs") as d:
        t0 = time.perf_counter()
        cli("compare", BENCHMARK_CONFIG, "--run-dir", tmp_path)
        elapsed = time.perf_counter() - t0
        cmp = json.loads((tmp_path / "mc_summary.json").read_text())["comparison"]
        check(cmp["n_pairs"] == 100, f"{cmp['n_pairs']} complete pairs")
        diff, se = cmp["mean_difference"], cmp["paired_se"]
        check(diff > 2 * se, f"difference {diff:.4f} vs 2 SE {2 * se:.4f}")
        check(elapsed < 600, f"took {elapsed:.0f} s")
        d.append(f"antler {cmp['antler']['mean_total_cost']:.3f}, baseline {cmp['baseline']['mean_total_cost']:.3f}, "
                 f"difference {diff:.3f} = {diff / se:.1f} paired SE")


@pytest.mark.slow
def test_criterion_9_every_start_terminates(report, study_runs, optimize_runs):
    with criterion(report, 9, "every start terminates with monotone cost") as d:
        starts = [s for r in json.loads((study_runs[0] / "study.json").read_text())["rows"] for s in r["starts"]]
        starts += json.loads((optimize_runs[0] / "optimize.json").read_text())["result"]["starts"]
        worst_iter = max(s["iterations"] for s in starts)
        check(worst_iter <= 100, f"a start used {worst_iter} iterations")
        rises = [s for s in starts if np.any(np.diff(s["cost_history"]) > 0)]
        check(not rises, f"{len(rises)} starts with a cost increase")
        statuses = sorted({s["status"] for s in starts})
        d.append(f"{len(starts)} starts, at most {worst_iter} iterations, statuses {statuses}")


@pytest.mark.slow
def test_criterion_10_byte_identical_outputs(report, study_runs, optimize_runs):
    with criterion(report, 10, "optimize/study outputs byte-identical on repeat") as d:
        pairs = [(study_runs[0] / f, study_runs[1] / f) for f in ("study.csv", "study.json")]
        pairs += [(optimize_runs[0] / f, optimize_runs[1] / f) for f in ("optimize.json", "trajectories.csv")]
        differ = [a.name for a, b in pairs if a.read_bytes() != b.read_bytes()]
        check(not differ, f"differs: {differ}")
        d.append(f"{len(pairs)} files identical")
