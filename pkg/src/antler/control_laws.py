"""Parametric online learning-based control laws ``u(D_t, theta, x_t)``.

A :class:`ControlLaw` wraps a vectorised *rule*
``rule(theta, x, mean, t) -> u`` where ``theta`` has shape ``(B, p)``,
``x`` and ``mean`` shape ``(B, n_x)`` and ``u`` shape ``(B, n_u)``.
``mean`` is the learner GP's posterior mean at the current state; how it
is produced depends on :attr:`ControlLaw.learning`:

``"online"``
    conditioned on everything measured so far (``D_t``),
``"frozen"``
    conditioned on the pre-deployment data only (``D_0``), which is the
    data-independent counterpart,
``"none"``
    the rule ignores the learner entirely.

The learner is queried at the augmented point ``(x, 0)``; with a
state-only kernel the input coordinates are irrelevant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .datasets import PriorData
from .exceptions import InvalidArgumentError
from .gp_core import GpState, KernelSpec, condition, condition_append, posterior

LEARNING_MODES = ("online", "frozen", "none")


def state_query(x, input_dim):
    """Augmented learner query ``(x, 0)``."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, np.zeros(x.shape[:-1] + (input_dim,))], axis=-1)


@dataclass(frozen=True, eq=False)
class LearnerDataset:
    """The law's measurement set ``D_t`` with one conditioned GP per state dimension.

    ``initial`` keeps the GPs conditioned on ``D_0`` (pre-deployment data
    only) so the frozen counterpart can be evaluated at any time.
    """

    current: Tuple[GpState, ...]
    initial: Tuple[GpState, ...]
    input_dim: int

    @classmethod
    def create(cls, kernels: Sequence[KernelSpec], input_dim: int, noise_variance,
               prior: Optional[PriorData] = None) -> "LearnerDataset":
        kernels = tuple(kernels)
        n_x = len(kernels)
        noise = np.broadcast_to(np.asarray(noise_variance, dtype=float), (n_x,))
        if prior is None:
            prior = PriorData.empty(n_x, input_dim)
        gps = tuple(
            condition(k, prior.inputs, prior.targets[:, i], float(noise[i]))
            for i, k in enumerate(kernels)
        )
        return cls(gps, gps, int(input_dim))

    @property
    def size(self) -> int:
        return self.current[0].size - self.initial[0].size

    @property
    def inputs(self) -> np.ndarray:
        """Augmented states measured online, in arrival order."""
        return self.current[0].inputs[self.initial[0].size:]

    @property
    def targets(self) -> np.ndarray:
        return np.stack([gp.targets[self.initial[0].size:] for gp in self.current], axis=-1)

    def append(self, x_aug, targets) -> "LearnerDataset":
        targets = np.atleast_1d(np.asarray(targets, dtype=float))
        gps = tuple(condition_append(gp, x_aug, targets[i]) for i, gp in enumerate(self.current))
        return replace(self, current=gps)

    def mean(self, x) -> np.ndarray:
        q = state_query(x, self.input_dim)
        return np.array([posterior(gp, q).mean for gp in self.current])

    def initial_mean(self, x) -> np.ndarray:
        q = state_query(x, self.input_dim)
        return np.array([posterior(gp, q).mean for gp in self.initial])

    def frozen(self) -> "LearnerDataset":
        return replace(self, current=self.initial)


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """A parametric control law plus its admissible parameter box.

    Parameters
    ----------
    name : str
    rule : callable
        ``rule(theta, x, mean, t) -> u`` on batched arrays.
    param_box : array_like, shape (p, 2)
        Closed interval per parameter; the compact search set.
    input_dim : int
    learning : {"online", "frozen", "none"}
    description : str
    """

    name: str
    rule: Callable
    param_box: np.ndarray
    input_dim: int
    learning: str = "online"
    description: str = ""

    def __post_init__(self):
        box = np.array(self.param_box, dtype=float, ndmin=2)
        if box.ndim != 2 or box.shape[1] != 2 or not np.all(box[:, 0] <= box[:, 1]) or not np.all(np.isfinite(box)):
            raise InvalidArgumentError(f"param_box must be (p, 2) finite intervals, got {self.param_box!r}")
        box.setflags(write=False)
        object.__setattr__(self, "param_box", box)
        if self.learning not in LEARNING_MODES:
            raise InvalidArgumentError(f"learning must be one of {LEARNING_MODES}")

    @property
    def param_dim(self) -> int:
        return self.param_box.shape[0]

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.param_box[:, 0]) and np.all(theta <= self.param_box[:, 1]))

    def project(self, theta) -> np.ndarray:
        return np.clip(np.asarray(theta, dtype=float), self.param_box[:, 0], self.param_box[:, 1])

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.shape[0] != self.param_dim or not np.all(np.isfinite(theta)):
            raise InvalidArgumentError(f"{self.name}: expected {self.param_dim} finite parameters, got {theta}")
        return theta

    def evaluate_batch(self, theta, x, mean, t) -> np.ndarray:
        u = np.asarray(self.rule(np.asarray(theta, float), np.asarray(x, float), mean, t), dtype=float)
        return u.reshape(len(x), self.input_dim)

    def evaluate(self, dataset: Optional[LearnerDataset], theta, x, t=0) -> np.ndarray:
        """Single-point evaluation ``u(D_t, theta, x_t)``; ``dataset=None`` means a zero mean."""
        theta = self.check_theta(theta)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        mean = None
        if self.learning != "none" and dataset is None:
            mean = np.zeros((1, x.shape[0]))
        elif self.learning == "online":
            mean = dataset.mean(x)[None, :]
        elif self.learning == "frozen":
            mean = dataset.initial_mean(x)[None, :]
        return self.evaluate_batch(theta[None, :], x[None, :], mean, t)[0]


def data_independent_counterpart(law: ControlLaw) -> ControlLaw:
    """The same law with its dataset frozen at ``D_0``."""
    if law.learning == "none":
        return law
    return replace(law, name=f"{law.name}/frozen", learning="frozen")


def gp_mean_tracking_law(dataset: Optional[LearnerDataset], theta, x, x_ref) -> float:
    """``u = -mu_t(x) - theta_1 * (x - theta_2 * x_ref)`` for a scalar state."""
    mean = 0.0 if dataset is None else float(dataset.mean(np.atleast_1d(x))[0])
    return -mean - theta[0] * (float(x) - theta[1] * float(x_ref))


def gp_tracking(reference, param_box=((-1.0, 2.0), (-1.0, 2.0))) -> ControlLaw:
    """Tracking law cancelling the learned model error.

    ``u_t = -mu_t(x_t) - theta_1 * (x_t - theta_2 * x_ref_t)`` applied per
    state dimension (``n_u == n_x``).  ``theta_1`` is a feedback gain and
    ``theta_2`` scales the reference.

    Parameters
    ----------
    reference : array_like, shape (N + 1,) or (N + 1, n_x)
        Reference trajectory indexed by time step.
    """
    ref = np.asarray(reference, dtype=float)
    ref = ref[:, None] if ref.ndim == 1 else ref
    ref.setflags(write=False)
    n_x = ref.shape[1]

    def rule(theta, x, mean, t):
        r = ref[min(t, len(ref) - 1)]
        u = -theta[:, :1] * (x - theta[:, 1:2] * r)
        if mean is not None:
            u = u - mean
        return u

    return ControlLaw("gp_tracking", rule, param_box, n_x, "online",
                      "u = -mu(x) - theta_1 (x - theta_2 x_ref)")


def linear_feedback_law(theta, x) -> np.ndarray:
    """``u = -Theta x`` with ``theta`` the row-major entries of ``Theta``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.size % x.size:
        raise InvalidArgumentError(f"{theta.size} gain entries do not fit a state of size {x.size}")
    return -theta.reshape(-1, x.size) @ x


def linear_feedback(state_dim, input_dim, param_box) -> ControlLaw:
    """Data-independent linear state feedback ``u = -Theta x``."""
    if np.array(param_box, ndmin=2).shape[0] != state_dim * input_dim:
        raise InvalidArgumentError("linear feedback needs one bound per gain entry")

    def rule(theta, x, mean, t):
        gains = theta.reshape(len(theta), input_dim, state_dim)
        return -np.einsum("bij,bj->bi", gains, x)

    return ControlLaw("linear_feedback", rule, param_box, input_dim, "none", "u = -Theta x")


LAW_CATALOG: Dict[str, Callable[..., ControlLaw]] = {
    "gp_tracking": gp_tracking,
    "linear_feedback": linear_feedback,
}


def make_law(name: str, **kwargs) -> ControlLaw:
    try:
        factory = LAW_CATALOG[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown control law {name!r}; known: {sorted(LAW_CATALOG)}") from None
    return factory(**kwargs)
