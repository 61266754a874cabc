"""Command-line entry point ``antler``.

Every subcommand takes a config file and writes its artifacts into a fresh
run directory ``<base>/<YYYYmmdd-HHMMSS>-<hash12>``; ``<base>`` is
``--out``, else ``$ANTLER_RUN_DIR``, else ``./runs``.  ``--run-dir`` names
the directory exactly.  Artifact contents never include timestamps, so
repeated runs of the same config give byte-identical files.

Exit status: 0 success, 2 invalid config or arguments, 3 numerical
failure, 4 divergence (all starts, or more than half of the Monte Carlo
runs).  Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .evaluation import compare_laws, mc_runs_csv, monte_carlo, summary_json
from .exceptions import ConfigError, DivergenceError, InvalidArgumentError, NumericalError
from .gp_core import log_marginal_likelihood
from .saa_optimizer import (antler_optimize, convergence_study, saa_cost_batch, stage_cost_matrix, study_csv)
from .world_model import trajectories_csv

RUN_DIR_ENV = "ANTLER_RUN_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_DIVERGED = 0, 2, 3, 4
COMMANDS = ("train-gp", "optimize", "study", "evaluate", "compare", "validate-config")


class _Diverged(Exception):
    """A command finished but most of its runs diverged."""


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        base = Path(args.out or os.environ.get(RUN_DIR_ENV) or "runs")
        path = base / f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg.config_hash[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _header(cfg: ExperimentConfig, **seeds) -> dict:
    return {
        "config_hash": cfg.config_hash,
        "config": cfg.resolved(),
        "seeds": {k: v for k, v in seeds.items()},
    }


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _optimize(cfg: ExperimentConfig, law=None):
    s = cfg.saa
    problem = cfg.problem(law=law)
    start_seed = s.seed if s.start_seed is None else s.start_seed
    res = antler_optimize(problem, s.n_starts, start_seed, max_iter=s.max_iter, tol_theta=s.tol_theta,
                          tol_cost=s.tol_cost, method=s.method)
    return problem, res


def _predicted_trajectories(problem, theta, path):
    batch = problem.rollouts(theta)
    trajectories_csv(batch, stage_cost_matrix(batch, problem.stage_cost), path)


def cmd_validate(cfg, args, out):
    kernels = cfg.kernels()
    print(f"config ok: {cfg.raw.get('name', '')} hash {cfg.config_hash[:12]}")
    for i, k in enumerate(kernels):
        print(f"  kernel[{i}]: signal_variance={k.signal_variance:.6g} lengthscale={k.lengthscale:.6g}")
    print(f"  law {cfg.law_name}, box {cfg.law().param_box.tolist()}, prior rows {len(cfg.prior_data)}")


def cmd_train_gp(cfg, args, out):
    kernels = cfg.kernels()
    noise = np.broadcast_to(cfg.process_noise_std ** 2, (cfg.state_dim,))
    rows = []
    for i, k in enumerate(kernels):
        lml = None
        if len(cfg.prior_data):
            lml = float(log_marginal_likelihood(k, cfg.prior_data.inputs, cfg.prior_data.targets[:, i],
                                                float(noise[i])))
        rows.append({"dim": i, "kernel": k.to_dict(), "log_marginal_likelihood": lml})
    payload = _header(cfg, train_seed=cfg.train_seed)
    payload["kernels"] = rows
    _write_json(out / "kernel.json", payload)


def cmd_optimize(cfg, args, out):
    t0 = time.perf_counter()
    problem, res = _optimize(cfg)
    payload = _header(cfg, saa_seed=cfg.saa.seed,
                      start_seed=cfg.saa.seed if cfg.saa.start_seed is None else cfg.saa.start_seed)
    payload["result"] = res.to_dict()
    payload["method"] = cfg.saa.method
    _write_json(out / "optimize.json", payload)
    _predicted_trajectories(problem, res.theta_star, out / "trajectories.csv")
    if args.timing:
        _write_json(out / "timing.json", {"optimize_s": time.perf_counter() - t0})
    print(f"theta* = {res.theta_star.tolist()}  cost = {res.cost_star:.6g}")


def cmd_study(cfg, args, out):
    s = cfg.saa
    rows = convergence_study(cfg.problem(M=1), s.M_list, s.seed, n_starts=s.n_starts, start_seed=s.start_seed,
                             max_iter=s.max_iter, tol_theta=s.tol_theta, tol_cost=s.tol_cost, method=s.method)
    study_csv(rows, out / "study.csv", include_time=args.timing)
    payload = _header(cfg, saa_seed=s.seed, start_seed=s.seed if s.start_seed is None else s.start_seed)
    payload["rows"] = [{"M": r.M, "theta": [float(v) for v in r.theta], "cost": float(r.cost),
                        "iterations": r.iterations, "starts": [st.to_dict() for st in r.result.starts]}
                       for r in rows]
    _write_json(out / "study.json", payload)
    for r in rows:
        print(f"M={r.M:5d}  theta={np.round(r.theta, 4).tolist()}  cost={r.cost:.6g}")


def _theta(arg, configured, fallback):
    if arg is not None:
        return np.asarray(arg, dtype=float)
    if configured is not None:
        return configured
    return fallback()


def cmd_evaluate(cfg, args, out):
    law = cfg.law()
    theta = _theta(args.theta, cfg.evaluation.theta_antler, lambda: _optimize(cfg)[1].theta_star)
    if not law.contains(theta):
        raise InvalidArgumentError(f"theta {theta.tolist()} lies outside the parameter box")
    ev = cfg.evaluation
    summary, batch = monte_carlo(cfg.true_system(), law, theta, ev.n_runs, ev.seed, stage_cost=cfg.stage_cost(),
                                 x0=cfg.x0, reference=cfg.reference, return_batch=True)
    mc_runs_csv({"antler": summary}, cfg.config_hash, out / "mc_runs.csv")
    payload = _header(cfg, evaluation_seed=ev.seed, run_seeds=[int(v) for v in summary.run_seeds])
    payload["summary"] = summary.to_dict()
    summary_json(payload, out / "mc_summary.json")
    trajectories_csv(batch, stage_cost_matrix(batch, cfg.stage_cost()), out / "trajectories.csv")
    print(f"mean total cost {summary.mean_total_cost:.6g} (std {summary.std_total_cost:.4g}), "
          f"{summary.diverged}/{summary.runs} diverged")
    if summary.diverged * 2 > summary.runs:
        raise _Diverged(f"{summary.diverged} of {summary.runs} runs diverged")


def cmd_compare(cfg, args, out):
    ev = cfg.evaluation
    law = cfg.law()
    predicted = {}

    def design(key, law_):
        problem, res = _optimize(cfg, law_)
        predicted[key] = {"theta": [float(v) for v in res.theta_star], "saa_cost": float(res.cost_star),
                          "M": res.M}
        return res.theta_star

    theta_a = _theta(None, ev.theta_antler, lambda: design("antler", law))
    theta_b = _theta(None, ev.theta_baseline, lambda: design("baseline", cfg.counterpart_law()))
    # both designs scored on the learning-aware SAA objective for the sign check
    problem = cfg.problem()
    scores = saa_cost_batch(problem, np.vstack([theta_a, theta_b])).costs
    cmp = compare_laws(cfg.true_system(), law, theta_a, theta_b, ev.n_runs, ev.seed, stage_cost=cfg.stage_cost(),
                       x0=cfg.x0, reference=cfg.reference, baseline=ev.baseline)
    mc_runs_csv({"antler": cmp.antler, "baseline": cmp.baseline}, cfg.config_hash, out / "mc_runs.csv")
    payload = _header(cfg, evaluation_seed=ev.seed, saa_seed=cfg.saa.seed,
                      run_seeds=[int(v) for v in cmp.antler.run_seeds])
    payload["comparison"] = cmp.to_dict()
    payload["designs"] = predicted
    payload["predicted_saa_cost"] = {"antler": float(scores[0]), "baseline": float(scores[1])}
    summary_json(payload, out / "mc_summary.json")
    print(f"antler {cmp.antler.mean_total_cost:.6g}  baseline {cmp.baseline.mean_total_cost:.6g}  "
          f"difference {cmp.mean_difference:.6g} +- {cmp.paired_se:.4g} (paired SE, {cmp.n_pairs} pairs)")
    if max(cmp.antler.diverged, cmp.baseline.diverged) * 2 > ev.n_runs:
        raise _Diverged("more than half of the runs diverged")


HANDLERS = {
    "validate-config": cmd_validate,
    "train-gp": cmd_train_gp,
    "optimize": cmd_optimize,
    "study": cmd_study,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="antler", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="experiment config (YAML)")
        if name != "validate-config":
            p.add_argument("--out", help=f"base directory for run directories (default ${RUN_DIR_ENV} or ./runs)")
            p.add_argument("--run-dir", help="exact output directory")
            p.add_argument("--timing", action="store_true", help="also record wall-clock times")
        if name == "evaluate":
            p.add_argument("--theta", type=float, nargs="+", help="parameters to evaluate")
    return parser


def _fail(kind, message, code, **extra):
    print(json.dumps({"error": kind, "message": message, "exit_code": code, **extra}), file=sys.stderr)
    return code


def run_command(argv=None) -> int:
    """Run one subcommand and return its exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        out = None if args.command == "validate-config" else _run_dir(args, cfg)
        HANDLERS[args.command](cfg, args, out)
        if out is not None:
            print(f"outputs in {out}")
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG, line=exc.line)
    except InvalidArgumentError as exc:
        return _fail("invalid_argument", str(exc), EXIT_CONFIG)
    except NumericalError as exc:
        return _fail("numerical", str(exc), EXIT_NUMERIC,
                     diagnostics={k: repr(v) for k, v in exc.diagnostics.items()})
    except DivergenceError as exc:
        return _fail("divergence", str(exc), EXIT_DIVERGED, step=exc.step, trajectory=exc.trajectory)
    except _Diverged as exc:
        return _fail("divergence", str(exc), EXIT_DIVERGED)
    return EXIT_OK


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
