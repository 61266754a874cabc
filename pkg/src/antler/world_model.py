"""Sequential sampling of closed-loop trajectories under GP model uncertainty.

The unknown part ``g`` of the dynamics ``x_{t+1} = f(x~_t) + g(x~_t) + w_t``
is drawn one step at a time from a *world* GP that is conditioned on the
values it has already produced, so the sampled function is consistent
along a trajectory.  The control law carries its own *learner* GP, fed
with the realisable measurements ``x_{t+1} - f(x~_t)``.

Two implementations share these semantics:

* :func:`rollout_sample` walks one trajectory with :class:`GpState`
  objects.  It is slow and is the reference.
* :func:`simulate_batch` advances many trajectories at once with
  preallocated per-trajectory Cholesky factors and compiled inner loops.
  It serves the optimizer and the Monte Carlo code.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .control_laws import ControlLaw, LearnerDataset
from .datasets import PriorData
from .exceptions import DivergenceError, InvalidArgumentError
from .gp_core import GpState, KernelSpec, condition, condition_append, posterior

DIVERGENCE_BOUND = 1e6
DEFAULT_CHUNK = 128

FAIL_NONE, FAIL_DIVERGED, FAIL_NUMERIC = 0, 1, 2


def additive_input(x, u):
    """Nominal model ``f(x, u) = x + u``."""
    return x + u


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Nominal model, process noise and GP prior of the uncertain system.

    Parameters
    ----------
    state_dim, input_dim : int
    prior_model : callable
        ``f(x, u)`` on arrays of shape ``(B, n_x)`` and ``(B, n_u)``.
    process_noise_std : array_like, shape (n_x,)
        Diagonal of ``Sigma_w``; scalars are broadcast.
    kernel : KernelSpec or sequence of KernelSpec
        One kernel per state dimension; a single kernel is shared.
    horizon : int
    prior_data : PriorData, optional
        Measurements taken before the design.  They seed the learner and,
        when ``world_uses_prior``, the world GP as well.
    world_uses_prior : bool
    """

    state_dim: int
    input_dim: int
    prior_model: Callable
    process_noise_std: np.ndarray
    kernel: Tuple[KernelSpec, ...]
    horizon: int
    prior_data: Optional[PriorData] = None
    world_uses_prior: bool = True

    def __post_init__(self):
        if int(self.state_dim) < 1 or int(self.input_dim) < 1 or int(self.horizon) < 1:
            raise InvalidArgumentError("state_dim, input_dim and horizon must be positive")
        object.__setattr__(self, "state_dim", int(self.state_dim))
        object.__setattr__(self, "input_dim", int(self.input_dim))
        object.__setattr__(self, "horizon", int(self.horizon))
        sw = np.broadcast_to(np.asarray(self.process_noise_std, dtype=float), (self.state_dim,)).copy()
        if np.any(sw < 0) or not np.all(np.isfinite(sw)):
            raise InvalidArgumentError(f"process noise std must be finite and >= 0, got {sw}")
        sw.setflags(write=False)
        object.__setattr__(self, "process_noise_std", sw)
        kern = self.kernel
        kernels = (kern,) * self.state_dim if isinstance(kern, KernelSpec) else tuple(kern)
        if len(kernels) != self.state_dim:
            raise InvalidArgumentError(f"need {self.state_dim} kernels, got {len(kernels)}")
        object.__setattr__(self, "kernel", kernels)
        prior = self.prior_data
        if prior is None:
            prior = PriorData.empty(self.state_dim, self.input_dim)
        elif prior.state_dim != self.state_dim or prior.input_dim != self.input_dim:
            raise InvalidArgumentError("prior data dimensions do not match the system")
        object.__setattr__(self, "prior_data", prior)
        fx = np.asarray(self.prior_model(np.zeros((1, self.state_dim)), np.zeros((1, self.input_dim))))
        if fx.shape != (1, self.state_dim):
            raise InvalidArgumentError(f"prior model returns shape {fx.shape}, expected (1, {self.state_dim})")

    @property
    def aug_dim(self) -> int:
        return self.state_dim + self.input_dim

    @property
    def noise_variance(self) -> np.ndarray:
        return self.process_noise_std ** 2

    def world_gps(self) -> Tuple[GpState, ...]:
        """Initial world GPs: prior data with noise ``sigma_w^2``, later points noiseless."""
        P = self.prior_data if self.world_uses_prior else PriorData.empty(self.state_dim, self.input_dim)
        return tuple(
            condition(k, P.inputs, P.targets[:, i], float(self.noise_variance[i]), default_noise=0.0)
            for i, k in enumerate(self.kernel)
        )

    def learner(self) -> LearnerDataset:
        return LearnerDataset.create(self.kernel, self.input_dim, self.noise_variance, self.prior_data)


@dataclass(frozen=True, eq=False)
class RolloutDraws:
    """Standard-normal draws ``zeta[m, t, i, c]`` fixed for one optimisation.

    Channel ``c = 0`` drives the function sample, ``c = 1`` the process
    noise.  Draws are generated in C order from one generator, so the
    first ``M'`` trajectories of a size-``M`` draw equal a size-``M'`` draw
    with the same seed.
    """

    zeta: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        z = np.array(self.zeta, dtype=float)
        if z.ndim != 4 or z.shape[3] != 2:
            raise InvalidArgumentError(f"draws must have shape (M, N, n_x, 2), got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise InvalidArgumentError("draws must be finite")
        z.setflags(write=False)
        object.__setattr__(self, "zeta", z)

    @classmethod
    def generate(cls, n_samples, horizon, state_dim, seed) -> "RolloutDraws":
        rng = np.random.default_rng(seed)
        return cls(rng.standard_normal((int(n_samples), int(horizon), int(state_dim), 2)), seed)

    @property
    def n_samples(self) -> int:
        return self.zeta.shape[0]

    @property
    def horizon(self) -> int:
        return self.zeta.shape[1]

    @property
    def state_dim(self) -> int:
        return self.zeta.shape[2]

    def head(self, n_samples) -> "RolloutDraws":
        if not 1 <= n_samples <= self.n_samples:
            raise InvalidArgumentError(f"cannot take {n_samples} of {self.n_samples} samples")
        return RolloutDraws(self.zeta[:n_samples], self.seed)

    def slice(self, m) -> np.ndarray:
        return self.zeta[m]


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One closed-loop trajectory.

    ``inputs`` holds ``u_0 .. u_{N-1}``; ``terminal_input`` is ``u_N``,
    which only enters the final stage cost.
    """

    states: np.ndarray
    inputs: np.ndarray
    g_samples: np.ndarray
    terminal_input: np.ndarray
    stage_costs: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return self.inputs.shape[0]

    def all_inputs(self) -> np.ndarray:
        return np.vstack([self.inputs, self.terminal_input[None, :]])


def one_step_sample(world_gps: Sequence[GpState], spec: SystemSpec, x_aug, zeta_f, zeta_w):
    """Draw ``g(x~)`` from the world GPs and form the next state.

    Returns ``(next_state, g_values)``; the caller conditions each world GP
    on ``(x~, g_values[i])``.
    """
    x_aug = np.asarray(x_aug, dtype=float).reshape(-1)
    zeta_f = np.asarray(zeta_f, dtype=float).reshape(-1)
    zeta_w = np.asarray(zeta_w, dtype=float).reshape(-1)
    n = spec.state_dim
    g = np.empty(n)
    for i, gp in enumerate(world_gps):
        post = posterior(gp, x_aug)
        g[i] = post.mean + np.sqrt(post.variance) * zeta_f[i]
    fx = np.asarray(spec.prior_model(x_aug[None, :n], x_aug[None, n:]), dtype=float)[0]
    return fx + g + spec.process_noise_std * zeta_w, g


def _learner_mean(law: ControlLaw, learner: LearnerDataset, x):
    if law.learning == "online":
        return learner.mean(x)[None, :]
    if law.learning == "frozen":
        return learner.initial_mean(x)[None, :]
    return None


def rollout_sample(spec: SystemSpec, law: ControlLaw, theta, draws, x0) -> Trajectory:
    """Sample one closed-loop trajectory (reference implementation).

    Parameters
    ----------
    draws : ndarray, shape (N, n_x, 2)
        One trajectory's slice of :class:`RolloutDraws`.

    Raises
    ------
    DivergenceError
        If a state leaves ``|x| <= 1e6`` or becomes non-finite.
    """
    theta = law.check_theta(theta)
    draws = np.asarray(draws, dtype=float)
    N, n = spec.horizon, spec.state_dim
    if draws.shape != (N, n, 2):
        raise InvalidArgumentError(f"draws slice must have shape {(N, n, 2)}, got {draws.shape}")
    world = list(spec.world_gps())
    learner = spec.learner()
    x = np.asarray(x0, dtype=float).reshape(n).copy()
    X = np.empty((N + 1, n))
    U = np.empty((N, spec.input_dim))
    G = np.empty((N, n))
    for t in range(N + 1):
        X[t] = x
        u = law.evaluate_batch(theta[None, :], x[None, :], _learner_mean(law, learner, x), t)[0]
        if t == N:
            break
        U[t] = u
        z = np.concatenate([x, u])
        x_next, g = one_step_sample(world, spec, z, draws[t, :, 0], draws[t, :, 1])
        world = [condition_append(gp, z, g[i]) for i, gp in enumerate(world)]
        if not np.all(np.isfinite(x_next)) or np.any(np.abs(x_next) > DIVERGENCE_BOUND):
            raise DivergenceError(f"state left the bound {DIVERGENCE_BOUND:g} at step {t + 1}", t + 1)
        fx = np.asarray(spec.prior_model(x[None, :], u[None, :]), dtype=float)[0]
        if law.learning == "online":
            learner = learner.append(z, x_next - fx)
        G[t] = g
        x = x_next
    return Trajectory(X, U, G, u)


# ---------------------------------------------------------------------------
# batched engine


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Trajectories produced by :func:`simulate_batch`.

    ``inputs`` has ``N + 1`` rows per trajectory (the last is ``u_N``).
    ``failed_step`` is ``-1`` for healthy trajectories, otherwise the step
    at which the trajectory diverged (``failure == 1``) or a GP factor
    lost positive definiteness (``failure == 2``).
    """

    states: np.ndarray
    inputs: np.ndarray
    g_samples: np.ndarray
    failed_step: np.ndarray
    failure: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.failed_step < 0

    def __len__(self):
        return self.states.shape[0]

    def trajectory(self, b) -> Trajectory:
        return Trajectory(self.states[b], self.inputs[b, :-1], self.g_samples[b], self.inputs[b, -1])


class _Base:
    """GP conditioned on the prior measurements, shared by every trajectory."""

    def __init__(self, kernel: KernelSpec, prior: PriorData, dim: int, noise: float, B: int, N: int):
        gp = condition(kernel, prior.inputs, prior.targets[:, dim], noise)
        d_proj = kernel.project(np.zeros((1, prior.inputs.shape[1]))).shape[1]
        self.Pp = np.ascontiguousarray(kernel.project(gp.inputs)).reshape(gp.size, d_proj)
        self.L = np.ascontiguousarray(gp.chol)
        self.vp = np.ascontiguousarray(gp.whitened)
        self.A = np.zeros((B, N, gp.size))


class _Probe:
    """Kernel quantities of one query per trajectory against a base and the online points.

    ``a`` and ``r`` use the plain kernel.  For rows whose query coincides
    with a stored input, ``a_m``/``r_m`` carry the jitter-matched versions.
    """

    def __init__(self, dim_state, base: _Base, n: int, qp: np.ndarray):
        ds = dim_state
        B = qp.shape[0]
        rows = ds.all_rows
        P = base.vp.shape[0]
        self.qp, self.n, self.base = qp, n, base
        self.a = np.empty((B, P))
        hit_p = np.zeros(B, dtype=np.bool_)
        _kernels.base_solve(base.Pp, base.L, qp, rows, ds.s2, ds.inv2l, ds.jit, False, self.a, hit_p)
        self.r = np.empty((B, n))
        hit_z = np.zeros(B, dtype=np.bool_)
        _kernels.residual(ds.Zp, base.A, n, qp, self.a, rows, ds.s2, ds.inv2l, ds.jit, False, self.r, hit_z)
        self.rows_m = np.flatnonzero(hit_p | hit_z)
        if self.rows_m.size:
            k = self.rows_m.size
            self.a_m = np.empty((k, P))
            self.r_m = np.empty((k, n))
            scratch = np.zeros(k, dtype=np.bool_)
            _kernels.base_solve(base.Pp, base.L, qp, self.rows_m, ds.s2, ds.inv2l, ds.jit, True, self.a_m, scratch)
            _kernels.residual(ds.Zp, base.A, n, qp, self.a_m, self.rows_m, ds.s2, ds.inv2l, ds.jit, True,
                              self.r_m, scratch)


class _Role:
    """Online part of one GP (world or learner) for every trajectory."""

    def __init__(self, base: _Base, noise: float, B: int, N: int):
        self.base = base
        self.noise = noise
        self.S = np.zeros((B, N, N))
        self.Vs = np.zeros((B, N))

    def query(self, ds, probe: _Probe):
        """Posterior mean and variance at the probe; also returns the plain ``w`` for appending."""
        n, B = probe.n, probe.a.shape[0]
        w = np.empty((B, n))
        _kernels.forward(self.S, n, probe.r, ds.all_rows, w)
        mean, var = np.empty(B), np.empty(B)
        _kernels.moments(probe.a, self.base.vp, w, self.Vs, n, ds.all_rows, ds.s2, mean, var)
        if probe.rows_m.size:
            k = probe.rows_m.size
            w_m = np.empty((k, n))
            _kernels.forward(self.S, n, probe.r_m, probe.rows_m, w_m)
            m_m, v_m = np.empty(k), np.empty(k)
            _kernels.moments(probe.a_m, self.base.vp, w_m, self.Vs, n, probe.rows_m, ds.s2 + ds.jit, m_m, v_m)
            mean[probe.rows_m] = m_m
            var[probe.rows_m] = v_m
        return mean, var, w

    def append(self, ds, probe: _Probe, w, y, fail):
        _kernels.append(self.S, self.Vs, probe.n, probe.a, w, self.base.vp, y, ds.s2, self.noise + ds.jit, fail)


def _frozen_mean(base: _Base, probe: _Probe):
    mean = probe.a @ base.vp
    if probe.rows_m.size:
        mean[probe.rows_m] = probe.a_m @ base.vp
    return mean


class _DimState:
    """Per-output-dimension GP bookkeeping for one chunk of trajectories."""

    def __init__(self, spec: SystemSpec, dim: int, B: int, world: bool, learning: str):
        kern = spec.kernel[dim]
        self.kernel = kern
        self.degenerate = kern.degenerate
        self.all_rows = np.arange(B)
        self.world = self.learner = None
        self.lbase = None
        if self.degenerate:
            return
        N = spec.horizon
        self.s2 = float(kern.signal_variance)
        self.inv2l = 1.0 / (2.0 * float(kern.lengthscale))
        self.jit = float(kern.jitter)
        noise = float(spec.noise_variance[dim])
        d_proj = kern.project(np.zeros((1, spec.aug_dim))).shape[1]
        self.Zp = np.zeros((B, N, d_proj))
        empty = PriorData.empty(spec.state_dim, spec.input_dim)
        if learning != "none":
            self.lbase = _Base(kern, spec.prior_data, dim, noise, B, N)
            if learning == "online":
                self.learner = _Role(self.lbase, noise, B, N)
        if world:
            if spec.world_uses_prior and self.lbase is not None:
                wbase = self.lbase
            else:
                wbase = _Base(kern, spec.prior_data if spec.world_uses_prior else empty, dim, noise, B, N)
            self.world = _Role(wbase, 0.0, B, N)

    def project(self, xa):
        return np.ascontiguousarray(self.kernel.project(xa))

    def bases(self):
        out = []
        lbase = self.lbase if self.learner is not None else None
        for role_base in (lbase, self.world.base if self.world else None):
            if role_base is not None and all(role_base is not b for b in out):
                out.append(role_base)
        return out


def _as_rows(a, B, width, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = np.broadcast_to(a, (B, a.shape[0]))
    if a.shape != (B, width):
        raise InvalidArgumentError(f"{name} must have shape ({B}, {width}), got {a.shape}")
    return np.ascontiguousarray(a)


def simulate_batch(spec: SystemSpec, law: ControlLaw, thetas, zeta, x0, *, true_g=None,
                   chunk_size: int = DEFAULT_CHUNK) -> RolloutBatch:
    """Run many closed-loop trajectories in lockstep.

    Parameters
    ----------
    thetas : array_like, shape (B, p) or (p,)
        Law parameters per trajectory.
    zeta : array_like, shape (B, N, n_x, 2)
        Standard-normal draws per trajectory.
    x0 : array_like, shape (n_x,) or (B, n_x)
    true_g : callable, optional
        ``g(x, u)`` on arrays.  When given, the ground truth replaces the
        world GP and ``zeta[..., 0]`` is ignored.
    chunk_size : int
        Trajectories processed together; bounds memory use.  Results do
        not depend on it.

    Returns
    -------
    RolloutBatch
        Failed trajectories are flagged, not raised; their later states
        are meaningless.
    """
    zeta = np.asarray(zeta, dtype=float)
    N, n = spec.horizon, spec.state_dim
    if zeta.ndim != 4 or zeta.shape[1:] != (N, n, 2):
        raise InvalidArgumentError(f"zeta must have shape (B, {N}, {n}, 2), got {zeta.shape}")
    B = zeta.shape[0]
    thetas = _as_rows(thetas, B, law.param_dim, "thetas")
    if not np.all(np.isfinite(thetas)):
        raise InvalidArgumentError("parameters must be finite")
    x0 = _as_rows(x0, B, n, "x0")
    parts = []
    for lo in range(0, B, max(1, int(chunk_size))):
        hi = min(B, lo + int(chunk_size))
        parts.append(_simulate_chunk(spec, law, thetas[lo:hi], zeta[lo:hi], x0[lo:hi], true_g))
    return RolloutBatch(*(np.concatenate([p[k] for p in parts]) for k in range(5)))


def _simulate_chunk(spec, law, thetas, zeta, x0, true_g):
    B = thetas.shape[0]
    N, n, m = spec.horizon, spec.state_dim, spec.input_dim
    learning = law.learning
    use_world = true_g is None
    X = np.empty((B, N + 1, n))
    U = np.empty((B, N + 1, m))
    G = np.zeros((B, N, n))
    failed_step = np.full(B, -1, dtype=np.int64)
    failure = np.zeros(B, dtype=np.int8)
    dims = [_DimState(spec, i, B, use_world, learning) for i in range(n)]
    sw = spec.process_noise_std
    x = x0.copy()
    zeros_u = np.zeros((B, m))
    numeric = np.zeros(B, dtype=np.bool_)

    for t in range(N + 1):
        X[:, t] = x
        # learner query at (x, 0)
        mean_l = None
        lprobes = [None] * n
        lw = [None] * n
        if learning != "none":
            mean_l = np.zeros((B, n))
            xl = np.concatenate([x, zeros_u], axis=1)
            for i, ds in enumerate(dims):
                if ds.degenerate:
                    continue
                qp = ds.project(xl)
                if learning == "online":
                    probe = _Probe(ds, ds.lbase, t, qp)
                    mean_l[:, i], _, lw[i] = ds.learner.query(ds, probe)
                    lprobes[i] = probe
                else:
                    mean_l[:, i] = _frozen_mean(ds.lbase, _Probe(ds, ds.lbase, 0, qp))
        u = law.evaluate_batch(thetas, x, mean_l, t)
        U[:, t] = u
        if t == N:
            break
        z = np.concatenate([x, u], axis=1)
        fx = np.asarray(spec.prior_model(x, u), dtype=float)
        zprobes = [None] * n
        zqp = [None] * n
        if use_world:
            g = np.zeros((B, n))
            for i, ds in enumerate(dims):
                if ds.degenerate:
                    continue
                qp = ds.project(z)
                zqp[i] = qp
                lp = lprobes[i]
                if lp is not None and lp.base is ds.world.base and np.array_equal(lp.qp, qp):
                    probe = lp
                else:
                    probe = _Probe(ds, ds.world.base, t, qp)
                zprobes[i] = probe
                mean, var, w = ds.world.query(ds, probe)
                g[:, i] = mean + np.sqrt(var) * zeta[:, t, i, 0]
                ds.world.append(ds, probe, w, g[:, i], numeric)
        else:
            g = np.asarray(true_g(x, u), dtype=float).reshape(B, n)
        G[:, t] = g
        x_next = fx + g + sw * zeta[:, t, :, 1]
        if learning == "online":
            for i, ds in enumerate(dims):
                if ds.degenerate:
                    continue
                qp = zqp[i] if zqp[i] is not None else ds.project(z)
                zqp[i] = qp
                lp = lprobes[i]
                if np.array_equal(lp.qp, qp):
                    probe, w = lp, lw[i]
                else:
                    zp = zprobes[i]
                    probe = zp if zp is not None and zp.base is ds.lbase else _Probe(ds, ds.lbase, t, qp)
                    w = np.empty((B, t))
                    _kernels.forward(ds.learner.S, t, probe.r, ds.all_rows, w)
                ds.learner.append(ds, probe, w, x_next[:, i] - fx[:, i], numeric)
                lprobes[i] = probe
        for i, ds in enumerate(dims):
            if ds.degenerate:
                continue
            qp = zqp[i] if zqp[i] is not None else ds.project(z)
            ds.Zp[:, t] = qp
            for base in ds.bases():
                if base is ds.lbase and lprobes[i] is not None and lprobes[i].base is base \
                        and np.array_equal(lprobes[i].qp, qp):
                    base.A[:, t] = lprobes[i].a
                elif zprobes[i] is not None and zprobes[i].base is base:
                    base.A[:, t] = zprobes[i].a
                else:
                    base.A[:, t] = _Probe(ds, base, 0, qp).a
        with np.errstate(invalid="ignore", over="ignore"):
            bad = ~np.all(np.isfinite(x_next), axis=1) | np.any(np.abs(x_next) > DIVERGENCE_BOUND, axis=1)
        new_div = bad & (failed_step < 0)
        failed_step[new_div] = t + 1
        failure[new_div] = FAIL_DIVERGED
        new_num = numeric & (failed_step < 0)
        failed_step[new_num] = t
        failure[new_num] = FAIL_NUMERIC
        x = np.where(bad[:, None], 0.0, x_next)
    return X, U, G, failed_step, failure


def expected_state_estimate(spec: SystemSpec, law: ControlLaw, theta, draws: RolloutDraws, x0):
    """Monte Carlo mean and variance of ``x_t`` over the sampled trajectories.

    Returns ``(mean, var)``, each of shape ``(N + 1, n_x)``; diverged
    trajectories are excluded.
    """
    batch = simulate_batch(spec, law, law.check_theta(theta), draws.zeta, x0)
    S = batch.states[batch.ok]
    if S.shape[0] == 0:
        raise DivergenceError("every sampled trajectory diverged", int(batch.failed_step.min()))
    return S.mean(axis=0), S.var(axis=0)


def trajectories_csv(batch: RolloutBatch, stage_costs=None, path=None, run_index=None) -> str:
    """Long-format CSV ``m,t,x_1..x_n,u_1..u_m,c_t`` (one row per step)."""
    B, T1, n = batch.states.shape
    m_u = batch.inputs.shape[2]
    header = ["m", "t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m_u)] + ["c_t"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    idx = range(B) if run_index is None else run_index
    for b, m in zip(range(B), idx):
        for t in range(T1):
            c = "" if stage_costs is None else repr(float(stage_costs[b, t]))
            w.writerow([m, t] + [repr(float(v)) for v in batch.states[b, t]]
                       + [repr(float(v)) for v in batch.inputs[b, t]] + [c])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
