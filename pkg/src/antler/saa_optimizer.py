"""Sample-average cost of a control law and its minimisation over the parameter box.

The expectation over closed-loop trajectories is replaced by the average
over ``M`` sampled trajectories whose random draws stay fixed, which turns
the design problem into a deterministic, smooth minimisation in ``theta``.
It is solved by a multi-start projected gradient method (optionally
BFGS-scaled) with finite-difference gradients.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .control_laws import ControlLaw
from .exceptions import DivergenceError, InvalidArgumentError
from .world_model import RolloutBatch, RolloutDraws, SystemSpec, simulate_batch

ARMIJO_C = 1e-4
SHRINK = 0.5
MAX_BACKTRACKS = 40


# ---------------------------------------------------------------------------
# stage costs


@dataclass(frozen=True, eq=False)
class TrackingCost:
    """``c_t = |x_t - r_t|^2 + input_weight * |u_t|^2``.

    Parameters
    ----------
    reference : array_like, shape (N + 1,) or (N + 1, n_x)
    input_weight : float
    """

    reference: np.ndarray
    input_weight: float = 0.0

    def __post_init__(self):
        ref = np.array(self.reference, dtype=float)
        ref = ref[:, None] if ref.ndim == 1 else ref
        ref.setflags(write=False)
        object.__setattr__(self, "reference", ref)
        if not self.input_weight >= 0:
            raise InvalidArgumentError("input_weight must be >= 0")

    def __call__(self, t, x, u):
        e = x - self.reference[t]
        c = np.sum(e * e, axis=-1)
        if self.input_weight:
            c = c + self.input_weight * np.sum(u * u, axis=-1)
        return c


@dataclass(frozen=True, eq=False)
class QuadraticCost:
    """``c_t = x' Q x + u' R u`` with positive semidefinite ``Q`` and ``R``."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.shape[0] != M.shape[1] or np.min(np.linalg.eigvalsh((M + M.T) / 2)) < -1e-12:
                raise InvalidArgumentError(f"{name} must be square positive semidefinite")
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    def __call__(self, t, x, u):
        return np.einsum("bi,ij,bj->b", x, self.Q, x) + np.einsum("bi,ij,bj->b", u, self.R, u)


@dataclass(frozen=True)
class ZeroCost:
    def __call__(self, t, x, u):
        return np.zeros(x.shape[0])


def stage_cost_matrix(batch: RolloutBatch, stage_cost) -> np.ndarray:
    """Per-step costs ``c_t(x_t, u_t)``, shape ``(B, N + 1)``."""
    B, T1, _ = batch.states.shape
    C = np.empty((B, T1))
    for t in range(T1):
        C[:, t] = stage_cost(t, batch.states[:, t], batch.inputs[:, t])
    return C


def trajectory_totals(batch: RolloutBatch, stage_cost) -> np.ndarray:
    """Total cost per trajectory; ``inf`` for failed trajectories."""
    with np.errstate(over="ignore", invalid="ignore"):
        C = stage_cost_matrix(batch, stage_cost)
        totals = np.sum(C, axis=1)
    return np.where(batch.ok, totals, np.inf)


# ---------------------------------------------------------------------------
# problem and objective


@dataclass(frozen=True, eq=False)
class SaaProblem:
    """Everything that defines the SAA objective.

    Parameters
    ----------
    system : SystemSpec
    law : ControlLaw
    stage_cost : callable
        ``c(t, x, u) -> (B,)`` nonnegative costs for ``t = 0 .. N``.
    x0 : array_like, shape (n_x,)
    draws : RolloutDraws
    """

    system: SystemSpec
    law: ControlLaw
    stage_cost: object
    x0: np.ndarray
    draws: RolloutDraws

    def __post_init__(self):
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape[0] != self.system.state_dim:
            raise InvalidArgumentError(f"x0 must have {self.system.state_dim} entries")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)
        z = self.draws.zeta
        if z.shape[1:] != (self.system.horizon, self.system.state_dim, 2):
            raise InvalidArgumentError(
                f"draws have shape {z.shape}, expected (M, {self.system.horizon}, {self.system.state_dim}, 2)")
        if self.law.input_dim != self.system.input_dim:
            raise InvalidArgumentError("law output dimension differs from the system input dimension")

    @property
    def M(self) -> int:
        return self.draws.n_samples

    def with_draws(self, draws: RolloutDraws) -> "SaaProblem":
        return replace(self, draws=draws)

    def with_law(self, law: ControlLaw) -> "SaaProblem":
        return replace(self, law=law)

    def rollouts(self, theta) -> RolloutBatch:
        return simulate_batch(self.system, self.law, self.law.check_theta(theta), self.draws.zeta, self.x0)


@dataclass(frozen=True)
class CostEvaluation:
    """Batch objective values and, for divergent parameters, where it happened."""

    costs: np.ndarray
    failed_trajectory: np.ndarray
    failed_step: np.ndarray


def saa_cost_batch(problem: SaaProblem, thetas) -> CostEvaluation:
    """Evaluate the SAA objective at several parameter vectors in one pass.

    A parameter vector whose rollouts fail anywhere gets cost ``inf``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    K, M = thetas.shape[0], problem.M
    if thetas.shape[1] != problem.law.param_dim or not np.all(np.isfinite(thetas)):
        raise InvalidArgumentError(f"parameters must be finite with {problem.law.param_dim} columns")
    zeta = np.broadcast_to(problem.draws.zeta[None], (K,) + problem.draws.zeta.shape)
    zeta = zeta.reshape((K * M,) + problem.draws.zeta.shape[1:])
    batch = simulate_batch(problem.system, problem.law, np.repeat(thetas, M, axis=0), zeta, problem.x0)
    totals = trajectory_totals(batch, problem.stage_cost).reshape(K, M)
    failed = (~batch.ok).reshape(K, M)
    steps = batch.failed_step.reshape(K, M)
    costs = np.empty(K)
    ftraj = np.full(K, -1)
    fstep = np.full(K, -1)
    for k in range(K):
        if failed[k].any():
            m = int(np.argmax(failed[k]))
            costs[k], ftraj[k], fstep[k] = np.inf, m, steps[k, m]
        else:
            costs[k] = np.sum(totals[k]) / M
    return CostEvaluation(costs, ftraj, fstep)


def saa_cost(problem: SaaProblem, theta) -> float:
    """``(1/M) sum_m sum_{t=0}^{N} c_t(x_t^m, u_t^m)`` with the problem's fixed draws.

    Raises
    ------
    DivergenceError
        Naming the first failing trajectory and step.
    """
    theta = problem.law.check_theta(theta)
    ev = saa_cost_batch(problem, theta[None, :])
    if not np.isfinite(ev.costs[0]):
        m, t = int(ev.failed_trajectory[0]), int(ev.failed_step[0])
        raise DivergenceError(f"sampled trajectory {m} failed at step {t}", t, m)
    return float(ev.costs[0])


def fd_steps(theta) -> np.ndarray:
    return np.maximum(1e-6, 1e-6 * np.abs(theta))


def _gradient_from(theta, cost, values, h):
    """Assemble central (or one-sided) differences from probe values ``[+h_0, -h_0, +h_1, ...]``."""
    p = theta.shape[0]
    grad = np.empty(p)
    for i in range(p):
        fp, fm = values[2 * i], values[2 * i + 1]
        if np.isfinite(fp) and np.isfinite(fm):
            grad[i] = (fp - fm) / (2 * h[i])
        elif np.isfinite(fp) and np.isfinite(cost):
            grad[i] = (fp - cost) / h[i]
        elif np.isfinite(fm) and np.isfinite(cost):
            grad[i] = (cost - fm) / h[i]
        else:
            raise DivergenceError(f"rollouts diverge on both sides of theta_{i + 1} = {theta[i]!r}", -1)
    return grad


def _probes(theta, h):
    p = theta.shape[0]
    P = np.repeat(theta[None, :], 2 * p, axis=0)
    for i in range(p):
        P[2 * i, i] += h[i]
        P[2 * i + 1, i] -= h[i]
    return P


def saa_cost_gradient(problem: SaaProblem, theta, cost=None) -> np.ndarray:
    """Central finite-difference gradient of :func:`saa_cost`.

    Step ``h_i = max(1e-6, 1e-6 |theta_i|)``; all probes share the fixed
    draws.  If one probe of a pair diverges, the one-sided difference
    against ``cost`` (the value at ``theta``) is used.
    """
    theta = problem.law.check_theta(theta)
    h = fd_steps(theta)
    values = saa_cost_batch(problem, _probes(theta, h)).costs
    if cost is None and not np.all(np.isfinite(values)):
        cost = saa_cost_batch(problem, theta[None, :]).costs[0]
    return _gradient_from(theta, cost, values, h)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class StartRecord:
    """Outcome of one descent run."""

    initial: np.ndarray
    final: np.ndarray
    cost: float
    iterations: int
    gradient_norm: float
    status: str
    history: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "initial": [float(v) for v in self.initial],
            "final": [float(v) for v in self.final],
            "cost": float(self.cost),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "status": self.status,
            "cost_history": [float(v) for v in self.history],
        }


@dataclass
class OptResult:
    """Best point over all starts plus every start's record."""

    theta_star: np.ndarray
    cost_star: float
    gradient_norm: float
    starts: List[StartRecord]
    M: int
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "theta_star": [float(v) for v in self.theta_star],
            "cost_star": float(self.cost_star),
            "gradient_norm": float(self.gradient_norm),
            "M": int(self.M),
            "seed": self.seed,
            "starts": [s.to_dict() for s in self.starts],
        }


def _projected_gradient_norm(theta, grad, law: ControlLaw) -> float:
    """Norm of the step ``P(theta - g) - theta``; zero at box-constrained stationary points."""
    return float(np.linalg.norm(law.project(theta - grad) - theta))


def _scaled_direction(theta, grad, H, box):
    """Two-metric projection direction.

    Coordinates sitting on a bound with the gradient pushing outward are
    moved along the (diagonally scaled) negative gradient, so projection
    clips them; the remaining coordinates use the full metric ``H``.
    """
    width = box[:, 1] - box[:, 0]
    eps = np.minimum(1e-3 * width, np.linalg.norm(theta - np.clip(theta - grad, box[:, 0], box[:, 1])))
    active = ((theta - box[:, 0] <= eps) & (grad > 0)) | ((box[:, 1] - theta <= eps) & (grad < 0))
    free = ~active
    d = np.empty_like(theta)
    d[active] = -np.diag(H)[active] * grad[active]
    d[free] = -H[np.ix_(free, free)] @ grad[free]
    return d


def _descend(problem: SaaProblem, theta0, max_iter, tol_theta, tol_cost, method="scaled") -> StartRecord:
    law = problem.law
    box = law.param_box
    theta = law.project(np.asarray(theta0, dtype=float))
    cost = float(saa_cost_batch(problem, theta[None, :]).costs[0])
    if not np.isfinite(cost):
        return StartRecord(theta.copy(), theta.copy(), np.inf, 0, np.nan, "diverged", [cost])
    history = [cost]
    try:
        grad = saa_cost_gradient(problem, theta, cost)
    except DivergenceError:
        return StartRecord(theta.copy(), theta.copy(), cost, 0, np.nan, "gradient_failed", history)
    p = theta.shape[0]
    width = float(np.min(box[:, 1] - box[:, 0])) or 1.0
    gnorm = float(np.linalg.norm(grad))
    # first trial step moves half the box width
    alpha0 = 0.5 * width / gnorm if gnorm > 0 else 1.0
    H = alpha0 * np.eye(p)
    status = "max_iter"
    it = 0
    while it < max_iter:
        if method == "scaled":
            directions = [_scaled_direction(theta, grad, H, box), -alpha0 * grad]
        else:
            directions = [-alpha0 * grad]
        accepted = False
        for d in directions:
            a = 1.0
            for _ in range(MAX_BACKTRACKS):
                trial = law.project(theta + a * d)
                step = trial - theta
                if not np.any(step):
                    break
                c_trial = float(saa_cost_batch(problem, trial[None, :]).costs[0])
                if np.isfinite(c_trial) and c_trial <= cost + ARMIJO_C * float(grad @ step):
                    accepted = True
                    break
                a *= SHRINK
            if accepted:
                break
        if not accepted:
            status = "stationary" if _projected_gradient_norm(theta, grad, law) == 0.0 else "line_search"
            break
        it += 1
        d_theta = float(np.max(np.abs(step)))
        d_cost = cost - c_trial
        theta, cost = trial, c_trial
        history.append(cost)
        if d_theta <= tol_theta and abs(d_cost) <= tol_cost * (1.0 + abs(cost)):
            status = "converged"
            try:
                grad = saa_cost_gradient(problem, theta, cost)
            except DivergenceError:
                pass
            break
        try:
            new_grad = saa_cost_gradient(problem, theta, cost)
        except DivergenceError:
            status = "gradient_failed"
            break
        y = new_grad - grad
        sy = float(step @ y)
        if method == "scaled":
            if sy > 1e-10 * float(np.linalg.norm(step) * np.linalg.norm(y)):
                if it == 1:
                    H = (sy / float(y @ y)) * np.eye(p)
                rho = 1.0 / sy
                V = np.eye(p) - rho * np.outer(step, y)
                H = V @ H @ V.T + rho * np.outer(step, step)
        else:
            # Barzilai-Borwein step length
            alpha0 = float(step @ step) / sy if sy > 0 else 2.0 * alpha0
            alpha0 = min(max(alpha0, 1e-10), 1e10)
        grad = new_grad
    return StartRecord(np.asarray(theta0, dtype=float).copy(), theta.copy(), cost, it,
                       _projected_gradient_norm(theta, grad, law), status, history)


def starting_points(law: ControlLaw, n_starts, seed) -> np.ndarray:
    """``n_starts`` uniform draws in the parameter box."""
    rng = np.random.default_rng(seed)
    box = law.param_box
    return rng.uniform(box[:, 0], box[:, 1], size=(int(n_starts), law.param_dim))


METHODS = ("scaled", "steepest")


def antler_optimize(problem: SaaProblem, n_starts: int = 8, seed: int = 0, *, max_iter: int = 100,
                    tol_theta: float = 1e-5, tol_cost: float = 1e-8, initial=None,
                    method: str = "scaled") -> OptResult:
    """Minimise the SAA objective over the law's parameter box.

    A projected gradient method with Armijo backtracking (``c = 1e-4``,
    shrink 0.5) runs from ``n_starts`` uniform starting points (or the rows
    of ``initial``).  With ``method="scaled"`` the gradient is scaled by a
    BFGS estimate of the inverse Hessian on the coordinates that are not
    held by a bound; ``"steepest"`` uses the plain gradient with
    Barzilai-Borwein step lengths.  Each accepted step lowers the
    objective.  The best finisher wins; exact cost ties go to the smaller
    projected gradient, then to the lexicographically smaller parameter
    vector.

    Raises
    ------
    DivergenceError
        If every start diverges.
    """
    if initial is None:
        if int(n_starts) < 1:
            raise InvalidArgumentError("n_starts must be positive")
        starts = starting_points(problem.law, n_starts, seed)
    else:
        starts = np.atleast_2d(np.asarray(initial, dtype=float))
        if starts.shape[1] != problem.law.param_dim:
            raise InvalidArgumentError("initial points have the wrong dimension")
    if int(max_iter) < 1:
        raise InvalidArgumentError("max_iter must be positive")
    if method not in METHODS:
        raise InvalidArgumentError(f"method must be one of {METHODS}")
    records = [_descend(problem, s, int(max_iter), tol_theta, tol_cost, method) for s in starts]
    finite = [r for r in records if np.isfinite(r.cost)]
    if not finite:
        raise DivergenceError(
            f"all {len(records)} starts diverged; statuses {[r.status for r in records]}", -1)
    best = min(finite, key=lambda r: (r.cost, r.gradient_norm, tuple(r.final)))
    return OptResult(best.final.copy(), best.cost, best.gradient_norm, records, problem.M, seed)


class AntlerDesign(BaseEstimator):
    """Estimator-style wrapper: ``fit(problem)`` finds ``theta_`` and ``cost_``.

    Parameters
    ----------
    n_starts : int
    random_state : int
        Seed for the starting points.
    max_iter : int
    tol_theta, tol_cost : float
        Stop once a step moves every coordinate at most ``tol_theta`` and
        changes the objective by at most ``tol_cost * (1 + cost)``.
    method : {"scaled", "steepest"}
    """

    def __init__(self, n_starts=8, random_state=0, max_iter=100, tol_theta=1e-5, tol_cost=1e-8,
                 method="scaled"):
        self.n_starts = n_starts
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol_theta = tol_theta
        self.tol_cost = tol_cost
        self.method = method

    def fit(self, problem: SaaProblem, y=None):
        res = antler_optimize(problem, self.n_starts, self.random_state, max_iter=self.max_iter,
                              tol_theta=self.tol_theta, tol_cost=self.tol_cost, method=self.method)
        self.result_ = res
        self.theta_ = res.theta_star
        self.cost_ = res.cost_star
        self.n_iter_ = max(s.iterations for s in res.starts)
        return self

    def score(self, problem: SaaProblem, y=None) -> float:
        """Negative SAA cost of the fitted parameters on ``problem`` (higher is better)."""
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "theta_")
        return -saa_cost(problem, self.theta_)


# ---------------------------------------------------------------------------
# convergence in M


@dataclass
class StudyRow:
    M: int
    theta: np.ndarray
    cost: float
    iterations: int
    wall_time_s: float
    result: Optional[OptResult] = None


def convergence_study(problem: SaaProblem, M_list: Sequence[int], seed: int, *, n_starts: int = 8,
                      start_seed: Optional[int] = None, max_iter: int = 100, tol_theta: float = 1e-5,
                      tol_cost: float = 1e-8, method: str = "scaled") -> List[StudyRow]:
    """Optimise with nested prefixes of one master draw for each ``M`` in ``M_list``.

    The master draw of ``max(M_list)`` trajectories comes from ``seed``;
    every row uses its first ``M`` trajectories and the same starting
    points (from ``start_seed``, default ``seed``).
    """
    M_list = [int(m) for m in M_list]
    if not M_list or min(M_list) < 1 or any(b < a for a, b in zip(M_list, M_list[1:])):
        raise InvalidArgumentError(f"M_list must be a nondecreasing list of positive integers, got {M_list}")
    sys_ = problem.system
    master = RolloutDraws.generate(max(M_list), sys_.horizon, sys_.state_dim, seed)
    starts = starting_points(problem.law, n_starts, seed if start_seed is None else start_seed)
    rows = []
    for M in M_list:
        t0 = time.perf_counter()
        res = antler_optimize(problem.with_draws(master.head(M)), initial=starts, max_iter=max_iter,
                              tol_theta=tol_theta, tol_cost=tol_cost, method=method)
        rows.append(StudyRow(M, res.theta_star, res.cost_star, max(s.iterations for s in res.starts),
                             time.perf_counter() - t0, res))
    return rows


def study_csv(rows: Sequence[StudyRow], path=None, include_time: bool = False) -> str:
    """Table ``M,theta_1..theta_p,cost[,wall_time_s]``.

    Wall time is left out unless asked for so that repeated runs give
    identical files.
    """
    p = rows[0].theta.shape[0] if rows else 0
    header = ["M"] + [f"theta_{i + 1}" for i in range(p)] + ["cost"] + (["wall_time_s"] if include_time else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([r.M] + [repr(float(v)) for v in r.theta] + [repr(float(r.cost))]
                   + ([f"{r.wall_time_s:.3f}"] if include_time else []))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
