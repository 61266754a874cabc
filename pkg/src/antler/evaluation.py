"""Monte Carlo evaluation of designed parameters on the true system.

The true system replaces the GP model error by a known function ``g``:
``x_{t+1} = f(x~_t) + g(x~_t) + w_t``.  The control law still learns
online from the measurements it collects.

Run ``i`` of a Monte Carlo study draws its process noise from
``default_rng(run_seeds[i])`` with ``run_seeds`` spawned from the study
seed, so a single run can be replayed with :func:`simulate_true_system`.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .control_laws import ControlLaw, data_independent_counterpart
from .datasets import PriorData
from .exceptions import DivergenceError, InvalidArgumentError
from .gp_core import KernelSpec
from .saa_optimizer import stage_cost_matrix
from .world_model import (DIVERGENCE_BOUND, SystemSpec, Trajectory, simulate_batch)

BASELINES = ("frozen", "online")


@dataclass(frozen=True, eq=False)
class TrueSystemSpec:
    """Ground-truth dynamics plus what the law's learner starts from.

    Parameters
    ----------
    prior_model : callable
        Nominal ``f(x, u)`` on batched arrays.
    true_g : callable
        ``g(x, u)`` on batched arrays, known only to the evaluator.
    process_noise_std : array_like
    horizon : int
    state_dim, input_dim : int
    kernel : KernelSpec or tuple, optional
        Learner kernel(s); ``None`` gives a learner that always predicts 0.
    prior_data : PriorData, optional
        Measurements the learner is conditioned on before deployment.
    """

    prior_model: Callable
    true_g: Callable
    process_noise_std: np.ndarray
    horizon: int
    state_dim: int = 1
    input_dim: int = 1
    kernel: object = None
    prior_data: Optional[PriorData] = None

    @classmethod
    def from_system(cls, system: SystemSpec, true_g) -> "TrueSystemSpec":
        return cls(system.prior_model, true_g, system.process_noise_std, system.horizon, system.state_dim,
                   system.input_dim, system.kernel, system.prior_data)

    def learner_system(self) -> SystemSpec:
        """The SystemSpec that carries the learner's kernel, noise and prior data."""
        kernel = KernelSpec(0.0, 1.0) if self.kernel is None else self.kernel
        return SystemSpec(self.state_dim, self.input_dim, self.prior_model, self.process_noise_std, kernel,
                          self.horizon, self.prior_data)

    def g(self, x, u) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        return np.asarray(self.true_g(x, u), dtype=float).reshape(x.shape[0], self.state_dim)


def process_noise(spec_or_system, seed) -> np.ndarray:
    """Standard-normal process-noise draws ``(N, n_x)`` for one run."""
    return np.random.default_rng(seed).standard_normal((spec_or_system.horizon, spec_or_system.state_dim))


def simulate_true_system(spec: TrueSystemSpec, law: ControlLaw, theta, seed, x0=None) -> Trajectory:
    """One closed-loop run of the true system (single-path reference).

    The learner appends ``(x~_t, x_{t+1} - f(x~_t))`` with noise variance
    ``sigma_w^2`` after each step when the law learns online.

    Raises
    ------
    DivergenceError
        If the state leaves ``|x| <= 1e6`` or becomes non-finite.
    """
    theta = law.check_theta(theta)
    system = spec.learner_system()
    n, N = spec.state_dim, spec.horizon
    w = process_noise(spec, seed)
    learner = system.learner()
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n).copy()
    X = np.empty((N + 1, n))
    U = np.empty((N, spec.input_dim))
    G = np.empty((N, n))
    for t in range(N + 1):
        X[t] = x
        mean = None
        if law.learning == "online":
            mean = learner.mean(x)[None, :]
        elif law.learning == "frozen":
            mean = learner.initial_mean(x)[None, :]
        u = law.evaluate_batch(theta[None, :], x[None, :], mean, t)[0]
        if t == N:
            break
        U[t] = u
        fx = np.asarray(spec.prior_model(x[None, :], u[None, :]), dtype=float)[0]
        g = spec.g(x, u)[0]
        x_next = fx + g + system.process_noise_std * w[t]
        if not np.all(np.isfinite(x_next)) or np.any(np.abs(x_next) > DIVERGENCE_BOUND):
            raise DivergenceError(f"true system left the bound {DIVERGENCE_BOUND:g} at step {t + 1}", t + 1)
        if law.learning == "online":
            learner = learner.append(np.concatenate([x, u]), x_next - fx)
        G[t] = g
        x = x_next
    return Trajectory(X, U, G, u)


def run_seeds(seed, n_runs) -> np.ndarray:
    """Independent per-run seeds spawned from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(int(n_runs))
    return np.array([int(c.generate_state(1, dtype=np.uint32)[0]) for c in children], dtype=np.int64)


@dataclass
class McSummary:
    """Monte Carlo statistics over the runs that stayed bounded.

    ``std_total_cost`` is the population standard deviation (zero for a
    single run).  ``per_step_error_*`` describe ``|x_t - x_ref_t|``
    (``|x_t|`` without a reference); ``per_step_cost_mean`` is the average
    immediate cost.
    """

    runs: int
    mean_total_cost: float
    std_total_cost: float
    per_step_error_mean: np.ndarray
    per_step_error_std: np.ndarray
    per_step_cost_mean: np.ndarray
    seed: int
    diverged: int
    total_costs: np.ndarray
    run_seeds: np.ndarray
    failed_step: np.ndarray
    law: str = ""
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self) -> np.ndarray:
        return self.failed_step < 0

    def to_dict(self) -> dict:
        return {
            "law": self.law,
            "theta": [float(v) for v in self.theta],
            "runs": int(self.runs),
            "diverged": int(self.diverged),
            "seed": int(self.seed),
            "mean_total_cost": float(self.mean_total_cost),
            "std_total_cost": float(self.std_total_cost),
            "per_step_error_mean": [float(v) for v in self.per_step_error_mean],
            "per_step_error_std": [float(v) for v in self.per_step_error_std],
            "per_step_cost_mean": [float(v) for v in self.per_step_cost_mean],
        }


def _aggregate(totals, ok):
    good = totals[ok]
    if good.size == 0:
        return np.nan, np.nan
    return float(np.mean(good)), float(np.std(good))


def _tracking_error(states, reference):
    if reference is None:
        return np.linalg.norm(states, axis=-1)
    ref = np.asarray(reference, dtype=float)
    ref = ref[:, None] if ref.ndim == 1 else ref
    return np.linalg.norm(states - ref[None, : states.shape[1]], axis=-1)


def _simulate_runs(spec, law, theta, seeds, x0):
    system = spec.learner_system()
    theta = law.check_theta(theta)
    zeta = np.zeros((len(seeds), spec.horizon, spec.state_dim, 2))
    for i, s in enumerate(seeds):
        zeta[i, :, :, 1] = process_noise(spec, s)
    x0 = np.zeros(spec.state_dim) if x0 is None else np.asarray(x0, dtype=float)
    return simulate_batch(system, law, theta, zeta, x0, true_g=spec.true_g)


def monte_carlo(spec: TrueSystemSpec, law: ControlLaw, theta, n_runs: int, seed: int, *, stage_cost,
                x0=None, reference=None, return_batch: bool = False):
    """Run ``n_runs`` independent true-system runs and summarise them.

    Diverged runs are counted in ``diverged`` and left out of every
    statistic.

    Returns
    -------
    McSummary, or ``(McSummary, RolloutBatch)`` when ``return_batch``.
    """
    if int(n_runs) < 1:
        raise InvalidArgumentError("n_runs must be at least 1")
    seeds = run_seeds(seed, n_runs)
    batch = _simulate_runs(spec, law, theta, seeds, x0)
    summary = _summarise(batch, stage_cost, reference, seeds, seed, law, theta)
    return (summary, batch) if return_batch else summary


def _summarise(batch, stage_cost, reference, seeds, seed, law, theta) -> McSummary:
    ok = batch.ok
    with np.errstate(over="ignore", invalid="ignore"):
        C = stage_cost_matrix(batch, stage_cost)
        totals = np.where(ok, np.sum(C, axis=1), np.inf)
    mean, std = _aggregate(totals, ok)
    err = _tracking_error(batch.states, reference)[ok]
    if err.shape[0]:
        e_mean, e_std, c_mean = err.mean(axis=0), err.std(axis=0), C[ok].mean(axis=0)
    else:
        T1 = batch.states.shape[1]
        e_mean = e_std = c_mean = np.full(T1, np.nan)
    return McSummary(len(seeds), mean, std, e_mean, e_std, c_mean, int(seed), int(np.sum(~ok)), totals,
                     np.asarray(seeds), batch.failed_step.copy(), law.name, np.asarray(theta, dtype=float))


@dataclass
class Comparison:
    """Paired comparison; ``mean_difference`` is baseline minus anticipating cost."""

    antler: McSummary
    baseline: McSummary
    baseline_mode: str
    n_pairs: int
    mean_difference: float
    paired_se: float

    @property
    def z_score(self) -> float:
        return self.mean_difference / self.paired_se if self.paired_se > 0 else np.inf * np.sign(self.mean_difference)

    def to_dict(self) -> dict:
        return {
            "baseline_mode": self.baseline_mode,
            "n_pairs": int(self.n_pairs),
            "mean_difference": float(self.mean_difference),
            "paired_se": float(self.paired_se),
            "antler": self.antler.to_dict(),
            "baseline": self.baseline.to_dict(),
        }


def paired_statistics(a_totals, b_totals):
    """``(n, mean(b - a), std(b - a, ddof=1) / sqrt(n))`` over pairs where both are finite."""
    a_totals, b_totals = np.asarray(a_totals, float), np.asarray(b_totals, float)
    both = np.isfinite(a_totals) & np.isfinite(b_totals)
    d = b_totals[both] - a_totals[both]
    n = int(d.size)
    if n == 0:
        return 0, np.nan, np.nan
    se = float(np.std(d, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return n, float(np.mean(d)), se


def compare_laws(spec: TrueSystemSpec, law: ControlLaw, theta_antler, theta_baseline, n_runs: int, seed: int, *,
                 stage_cost, x0=None, reference=None, baseline: str = "frozen") -> Comparison:
    """Paired Monte Carlo of the learning law against a baseline.

    Run ``i`` of both arms sees the same process noise.  The baseline arm
    applies ``theta_baseline`` to the data-independent counterpart
    (``baseline="frozen"``) or to the learning law itself
    (``baseline="online"``).
    """
    if baseline not in BASELINES:
        raise InvalidArgumentError(f"baseline must be one of {BASELINES}")
    base_law = data_independent_counterpart(law) if baseline == "frozen" else law
    a = monte_carlo(spec, law, theta_antler, n_runs, seed, stage_cost=stage_cost, x0=x0, reference=reference)
    b = monte_carlo(spec, base_law, theta_baseline, n_runs, seed, stage_cost=stage_cost, x0=x0,
                    reference=reference)
    n, diff, se = paired_statistics(a.total_costs, b.total_costs)
    return Comparison(a, b, baseline, n, diff, se)


def mc_runs_csv(arms: Dict[str, McSummary], config_hash: str = "", path=None) -> str:
    """Per-run records ``arm,run,run_seed,total_cost,diverged,failed_step,seed,config_hash``.

    ``arms`` maps an arm label to its summary; rows follow its order.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["arm", "run", "run_seed", "total_cost", "diverged", "failed_step", "seed", "config_hash"])
    for arm, s in arms.items():
        for i in range(s.runs):
            w.writerow([arm, i, int(s.run_seeds[i]), repr(float(s.total_costs[i])), int(not s.ok[i]),
                        int(s.failed_step[i]), s.seed, config_hash])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def read_mc_runs(path_or_text) -> dict:
    """Parse :func:`mc_runs_csv` output into ``{arm: total_costs}`` (diverged runs as ``inf``)."""
    text = path_or_text
    if "\n" not in str(path_or_text):
        with open(path_or_text) as fh:
            text = fh.read()
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(row["arm"], []).append(float(row["total_cost"]))
    return {k: np.array(v) for k, v in out.items()}


def summary_json(payload: dict, path=None) -> str:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
