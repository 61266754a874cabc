"""Exact Gaussian-process regression with a squared-exponential kernel.

The kernel is parameterised as ``k(a, b) = s * exp(-|a - b|^2 / (2 * l))``,
i.e. ``l`` multiplies the squared distance directly (a "squared
lengthscale").  Every GP in this package has a zero prior mean; prior
knowledge about the dynamics lives in the nominal model instead.

Conditioning sets are factorised with a lower Cholesky factor of
``K + diag(noise) + jitter * I`` where ``jitter = 1e-10 * signal_variance``.
Appending one point extends the factor by one row in O(n^2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import InvalidArgumentError, NumericalError

JITTER_SCALE = 1e-10
LOG_2PI = math.log(2.0 * math.pi)

# bounds used by train_hyperparameters (natural units)
SIGNAL_VARIANCE_BOUNDS = (1e-6, 1e4)
LENGTHSCALE_BOUNDS = (1e-4, 1e4)


@dataclass(frozen=True)
class KernelSpec:
    """Squared-exponential kernel hyperparameters.

    Parameters
    ----------
    signal_variance : float
        Output scale ``s``.  Zero is allowed and yields the degenerate
        kernel ``k == 0`` (the GP is identically zero).
    lengthscale : float
        Positive scale ``l`` dividing the squared distance.
    active_dims : tuple of int, optional
        Coordinates of the input vector the kernel reads.  ``None`` reads
        all of them; ``(0,)`` on an augmented state ``(x, u)`` with scalar
        ``x`` gives the state-only kernel.
    """

    signal_variance: float = 1.0
    lengthscale: float = 1.0
    active_dims: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        s, l = float(self.signal_variance), float(self.lengthscale)
        if not (math.isfinite(s) and s >= 0.0):
            raise InvalidArgumentError(f"signal_variance must be >= 0, got {self.signal_variance!r}")
        if not (math.isfinite(l) and l > 0.0):
            raise InvalidArgumentError(f"lengthscale must be > 0, got {self.lengthscale!r}")
        object.__setattr__(self, "signal_variance", s)
        object.__setattr__(self, "lengthscale", l)
        if self.active_dims is not None:
            dims = tuple(int(d) for d in self.active_dims)
            if not dims or min(dims) < 0 or len(set(dims)) != len(dims):
                raise InvalidArgumentError(f"invalid active_dims {self.active_dims!r}")
            object.__setattr__(self, "active_dims", dims)

    @property
    def degenerate(self) -> bool:
        return self.signal_variance == 0.0

    @property
    def jitter(self) -> float:
        return JITTER_SCALE * self.signal_variance

    def project(self, X):
        """Select the active coordinates of ``X`` (last axis)."""
        X = np.asarray(X, dtype=float)
        if self.active_dims is None:
            return X
        if X.shape[-1] <= max(self.active_dims):
            raise InvalidArgumentError(
                f"input has {X.shape[-1]} coordinates, kernel reads {self.active_dims}"
            )
        return X[..., list(self.active_dims)]

    def gram(self, A, B=None):
        """Kernel matrix between the rows of ``A`` and ``B``."""
        A = self.project(np.atleast_2d(A))
        B = A if B is None else self.project(np.atleast_2d(B))
        diff = A[:, None, :] - B[None, :, :]
        return self.signal_variance * np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * self.lengthscale))

    def with_params(self, signal_variance, lengthscale) -> "KernelSpec":
        return KernelSpec(signal_variance, lengthscale, self.active_dims)

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "lengthscale": self.lengthscale,
            "active_dims": None if self.active_dims is None else list(self.active_dims),
        }

    @classmethod
    def from_dict(cls, d) -> "KernelSpec":
        dims = d.get("active_dims")
        return cls(d["signal_variance"], d["lengthscale"], None if dims is None else tuple(dims))


def kernel_eval(spec: KernelSpec, a, b) -> float:
    """Evaluate ``k(a, b)`` for two single inputs."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidArgumentError("kernel inputs must be finite")
    if a.shape != b.shape:
        raise InvalidArgumentError(f"input shapes differ: {a.shape} vs {b.shape}")
    d = spec.project(a) - spec.project(b)
    return spec.signal_variance * math.exp(-float(d @ d) / (2.0 * spec.lengthscale))


@dataclass(frozen=True)
class PosteriorQuery:
    mean: float
    variance: float


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GpState:
    """A zero-mean GP conditioned on a finite dataset.

    Treat instances as values: every conditioning operation returns a new
    state and the stored arrays are read-only.

    Attributes
    ----------
    kernel : KernelSpec
    inputs : ndarray, shape (n, d)
    targets : ndarray, shape (n,)
    noise : ndarray, shape (n,)
        Per-point variance added to the Gram diagonal (before jitter).
    noise_variance : float
        Default noise for points appended later.
    chol : ndarray, shape (n, n)
        Lower factor of ``K + diag(noise) + jitter * I``.  For the
        degenerate kernel this is ``diag(sqrt(noise))``.
    whitened : ndarray, shape (n,)
        ``chol^{-1} targets``; caches half of the mean computation.
    """

    kernel: KernelSpec
    inputs: np.ndarray
    targets: np.ndarray
    noise: np.ndarray
    noise_variance: float
    chol: np.ndarray
    whitened: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def gram(self) -> np.ndarray:
        """``K + diag(noise) + jitter * I`` rebuilt from scratch."""
        K = self.kernel.gram(self.inputs) if self.size else np.zeros((0, 0))
        return K + np.diag(self.noise + self.kernel.jitter)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "noise": self.noise.tolist(),
            "noise_variance": self.noise_variance,
            "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d) -> "GpState":
        kernel = KernelSpec.from_dict(d["kernel"])
        inputs = np.asarray(d["inputs"], dtype=float)
        if inputs.ndim != 2:
            inputs = inputs.reshape(0, int(d["input_dim"])) if inputs.size == 0 else inputs.reshape(-1, 1)
        return condition(kernel, inputs, d["targets"], np.asarray(d["noise"], dtype=float),
                         default_noise=d["noise_variance"])


def _check_noise(noise_variance) -> float:
    v = float(noise_variance)
    if not (math.isfinite(v) and v >= 0.0):
        raise InvalidArgumentError(f"noise variance must be finite and >= 0, got {noise_variance!r}")
    return v


def empty_gp(kernel: KernelSpec, input_dim: int, noise_variance: float = 0.0) -> GpState:
    """Unconditioned GP (the zero-mean prior)."""
    z = np.zeros(0)
    return GpState(kernel, _readonly(np.zeros((0, int(input_dim)))), _readonly(z), _readonly(z),
                   _check_noise(noise_variance), _readonly(np.zeros((0, 0))), _readonly(z))


def _factorize(gram, diagnostics_source):
    try:
        return linalg.cholesky(gram, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        with np.errstate(all="ignore"):
            try:
                cond = float(np.linalg.cond(gram))
            except np.linalg.LinAlgError:
                cond = float("inf")
            min_diag = float(np.min(np.diag(gram))) if gram.size else float("nan")
        raise NumericalError(
            f"Gram matrix of {diagnostics_source} is not positive definite",
            {"condition_number": cond, "min_diagonal": min_diag, "size": gram.shape[0]},
        ) from exc


def condition(kernel: KernelSpec, inputs, targets, noise_variance=0.0, *, default_noise=None) -> GpState:
    """Condition the prior on ``(inputs, targets)`` in one batch factorisation.

    ``noise_variance`` is either a scalar applied to every point or an
    array with one entry per point.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise InvalidArgumentError(f"{X.shape[0]} inputs but {y.shape[0]} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidArgumentError("conditioning data must be finite")
    noise = np.broadcast_to(np.asarray(noise_variance, dtype=float), y.shape).copy()
    if np.any(noise < 0) or not np.all(np.isfinite(noise)):
        raise InvalidArgumentError("noise variances must be finite and >= 0")
    if default_noise is None:
        default_noise = float(noise_variance) if np.ndim(noise_variance) == 0 else 0.0
    default_noise = _check_noise(default_noise)
    if kernel.degenerate:
        L = np.diag(np.sqrt(noise))
        return GpState(kernel, _readonly(X), _readonly(y), _readonly(noise), default_noise,
                       _readonly(L), _readonly(np.zeros_like(y)))
    gram = kernel.gram(X) + np.diag(noise + kernel.jitter) if y.size else np.zeros((0, 0))
    L = _factorize(gram, f"{y.size} conditioning points") if y.size else gram
    v = linalg.solve_triangular(L, y, lower=True) if y.size else y
    return GpState(kernel, _readonly(X), _readonly(y), _readonly(noise), default_noise,
                   _readonly(L), _readonly(v))


def _as_query(gp: GpState, query) -> np.ndarray:
    q = np.atleast_1d(np.asarray(query, dtype=float)).reshape(-1)
    if q.shape[0] != gp.input_dim:
        raise InvalidArgumentError(f"query has {q.shape[0]} coordinates, GP inputs have {gp.input_dim}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError("query must be finite")
    return q


def kernel_vector(gp: GpState, query) -> np.ndarray:
    """Kernel evaluations between every stored input and ``query``."""
    q = _as_query(gp, query)
    if gp.size == 0:
        return np.zeros(0)
    return gp.kernel.gram(gp.inputs, q[None, :])[:, 0]


def _whiten(gp: GpState, k):
    return linalg.solve_triangular(gp.chol, k, lower=True, check_finite=False)


def _cross_with_nugget(gp: GpState, Q):
    """Kernel block between stored inputs and query rows ``Q``.

    A query that coincides exactly with a stored input is treated as a
    re-observation of the same latent value, so the jitter on that diagonal
    entry is added to the cross term as well.  Returns the block and the
    per-query prior variance ``k(q, q)`` (plus jitter when matched).
    """
    kern = gp.kernel
    Zs, Zq = kern.project(gp.inputs), kern.project(Q)
    diff = Zs[:, None, :] - Zq[None, :, :]
    sq = np.sum(diff * diff, axis=-1)
    K = kern.signal_variance * np.exp(-sq / (2.0 * kern.lengthscale))
    match = sq == 0.0
    K = K + kern.jitter * match
    kqq = kern.signal_variance + kern.jitter * np.any(match, axis=0)
    return K, kqq


def posterior(gp: GpState, query) -> PosteriorQuery:
    """Posterior mean and variance of the latent function at ``query``.

    ``mean = k^T (K + N)^{-1} y`` and ``var = k(q,q) - k^T (K + N)^{-1} k``
    (clamped at zero), both through one triangular solve against the
    cached factor.
    """
    q = _as_query(gp, query)
    mean, var = predict(gp, q[None, :])
    return PosteriorQuery(float(mean[0]), float(var[0]))


def predict(gp: GpState, X) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`posterior` over the rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if gp.input_dim == 1 else X[None, :]
    kern = gp.kernel
    if kern.degenerate:
        return np.zeros(len(X)), np.zeros(len(X))
    if gp.size == 0:
        return np.zeros(len(X)), np.full(len(X), kern.signal_variance)
    K, kqq = _cross_with_nugget(gp, X)
    W = _whiten(gp, K)
    mean = W.T @ gp.whitened
    var = kqq - np.sum(W * W, axis=0)
    return mean, np.maximum(var, 0.0)


def condition_append(gp: GpState, new_input, new_target, noise_variance=None) -> GpState:
    """Return ``gp`` additionally conditioned on one point.

    The Cholesky factor grows by one row: ``w = L^{-1} k``,
    ``d = sqrt(k(q,q) + noise + jitter - w.w)``.
    """
    q = _as_query(gp, new_input)
    y = float(new_target)
    if not math.isfinite(y):
        raise InvalidArgumentError("target must be finite")
    noise = gp.noise_variance if noise_variance is None else _check_noise(noise_variance)
    n = gp.size
    kern = gp.kernel

    inputs = np.vstack([gp.inputs, q[None, :]])
    targets = np.append(gp.targets, y)
    noises = np.append(gp.noise, noise)
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = gp.chol
    if kern.degenerate:
        L[n, n] = math.sqrt(noise)
        whitened = np.zeros(n + 1)
    else:
        w = _whiten(gp, kernel_vector(gp, q)) if n else np.zeros(0)
        d2 = kern.signal_variance + noise + kern.jitter - float(w @ w)
        if not d2 > 0.0:
            raise NumericalError("degenerate rank-1 Cholesky extension",
                                 {"pivot_squared": d2, "size": n + 1})
        d = math.sqrt(d2)
        L[n, :n] = w
        L[n, n] = d
        whitened = np.append(gp.whitened, (y - float(w @ gp.whitened)) / d)
    return GpState(kern, _readonly(inputs), _readonly(targets), _readonly(noises),
                   gp.noise_variance, _readonly(L), _readonly(whitened))


def _sqdist(X):
    diff = X[:, None, :] - X[None, :, :]
    return np.sum(diff * diff, axis=-1)


def log_marginal_likelihood(spec: KernelSpec, inputs, targets, noise_variance=0.0,
                            return_gradient=False):
    """Log evidence of ``targets`` under the GP prior plus Gaussian noise.

    With ``return_gradient`` the derivative with respect to
    ``(log signal_variance, log lengthscale)`` is returned as well.
    """
    X = np.asarray(inputs, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(targets, dtype=float).reshape(-1)
    n = y.shape[0]
    if n < 1:
        raise InvalidArgumentError("log marginal likelihood needs at least one data point")
    if X.shape[0] != n:
        raise InvalidArgumentError(f"{X.shape[0]} inputs but {n} targets")
    noise = _check_noise(noise_variance)
    D = _sqdist(spec.project(X))
    E = np.exp(-D / (2.0 * spec.lengthscale))
    Ks = spec.signal_variance * E
    K = Ks + (noise + spec.jitter) * np.eye(n)
    L = _factorize(K, "the marginal likelihood")
    alpha = linalg.cho_solve((L, True), y)
    lml = -0.5 * float(y @ alpha) - float(np.sum(np.log(np.diag(L)))) - 0.5 * n * LOG_2PI
    if not return_gradient:
        return lml
    inner = np.outer(alpha, alpha) - linalg.cho_solve((L, True), np.eye(n))
    dK_dlogs = Ks + spec.jitter * np.eye(n)
    dK_dlogl = Ks * D / (2.0 * spec.lengthscale)
    grad = 0.5 * np.array([np.sum(inner * dK_dlogs), np.sum(inner * dK_dlogl)])
    return lml, grad


def train_hyperparameters(inputs, targets, noise_variance, init: KernelSpec, n_restarts=5,
                          max_iter=200, random_state=0,
                          signal_variance_bounds=SIGNAL_VARIANCE_BOUNDS,
                          lengthscale_bounds=LENGTHSCALE_BOUNDS) -> KernelSpec:
    """Maximise the log marginal likelihood over ``(signal_variance, lengthscale)``.

    L-BFGS-B in log space, started from ``init`` and from ``n_restarts``
    log-uniform points inside the bounds.  The returned kernel never has
    lower evidence than ``init``.  A :class:`ConvergenceWarning` is issued
    when the best run hit ``max_iter``.
    """
    X = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(-1)
    if y.shape[0] < 2:
        raise InvalidArgumentError("hyperparameter training needs at least two data points")
    if init.degenerate:
        raise InvalidArgumentError("cannot train from a zero signal variance")
    bounds = np.log([signal_variance_bounds, lengthscale_bounds])

    def objective(logp):
        kern = init.with_params(*np.exp(logp))
        try:
            lml, grad = log_marginal_likelihood(kern, X, y, noise_variance, return_gradient=True)
        except NumericalError:
            return 1e25, np.zeros(2)
        return -lml, -grad

    x_init = np.clip(np.log([init.signal_variance, init.lengthscale]), bounds[:, 0], bounds[:, 1])
    rng = np.random.default_rng(random_state)
    starts = [x_init] + [rng.uniform(bounds[:, 0], bounds[:, 1]) for _ in range(n_restarts)]

    init_value = -objective(np.log([init.signal_variance, init.lengthscale]))[0]
    best_x, best_value, best_converged = None, -np.inf, True
    for x0 in starts:
        res = optimize.minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": max_iter})
        if -res.fun > best_value:
            best_x, best_value = res.x, -res.fun
            best_converged = res.nit < max_iter
    if best_value < init_value:
        return init
    if not best_converged:
        warnings.warn("hyperparameter optimisation reached max_iter", ConvergenceWarning)
    return init.with_params(*np.exp(best_x))


class GaussianProcessModel(RegressorMixin, BaseEstimator):
    """Scikit-learn style exact GP regressor with the squared-exponential kernel.

    Parameters
    ----------
    signal_variance, lengthscale : float
        Kernel hyperparameters (initial values when optimising).
    noise_variance : float
        Observation noise variance added to the Gram diagonal.
    active_dims : tuple of int, optional
        Input coordinates read by the kernel.
    optimize : bool
        Train hyperparameters by log marginal likelihood in :meth:`fit`.
    n_restarts : int
        Random restarts for the optimiser.
    random_state : int
        Seed for the restart locations.

    Attributes
    ----------
    kernel_ : KernelSpec
    state_ : GpState
    log_marginal_likelihood_value_ : float
    """

    def __init__(self, signal_variance=1.0, lengthscale=1.0, noise_variance=0.0,
                 active_dims=None, optimize=False, n_restarts=5, random_state=0):
        self.signal_variance = signal_variance
        self.lengthscale = lengthscale
        self.noise_variance = noise_variance
        self.active_dims = active_dims
        self.optimize = optimize
        self.n_restarts = n_restarts
        self.random_state = random_state

    def _init_kernel(self):
        dims = None if self.active_dims is None else tuple(self.active_dims)
        return KernelSpec(self.signal_variance, self.lengthscale, dims)

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        kernel = self._init_kernel()
        if self.optimize:
            kernel = train_hyperparameters(X, y, self.noise_variance, kernel,
                                           n_restarts=self.n_restarts,
                                           random_state=self.random_state)
        self.kernel_ = kernel
        self.state_ = condition(kernel, X, y, self.noise_variance)
        self.n_features_in_ = X.shape[1]
        self.log_marginal_likelihood_value_ = (
            log_marginal_likelihood(kernel, X, y, self.noise_variance) if not kernel.degenerate else float("nan")
        )
        return self

    def partial_fit(self, X, y):
        """Condition on extra rows one at a time without refactorising."""
        X, y = check_X_y(X, y, y_numeric=True)
        if not hasattr(self, "state_"):
            self.kernel_ = self._init_kernel()
            self.state_ = empty_gp(self.kernel_, X.shape[1], self.noise_variance)
            self.n_features_in_ = X.shape[1]
        state = self.state_
        for xi, yi in zip(X, y):
            state = condition_append(state, xi, yi)
        self.state_ = state
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "state_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise InvalidArgumentError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        mean, var = predict(self.state_, X)
        if return_std:
            return mean, np.sqrt(var)
        return mean


__all__ = [
    "KernelSpec",
    "GpState",
    "PosteriorQuery",
    "GaussianProcessModel",
    "kernel_eval",
    "kernel_vector",
    "posterior",
    "predict",
    "condition",
    "condition_append",
    "empty_gp",
    "log_marginal_likelihood",
    "train_hyperparameters",
    "JITTER_SCALE",
]
