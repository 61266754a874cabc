"""Named building blocks for experiment configs and the bundled tracking benchmark.

Configs select nominal models, ground-truth functions, reference profiles
and stage costs by ``kind`` plus keyword parameters; the factories here
turn those into callables.

The bundled benchmark (``data/benchmark.yaml``) is a scalar tracking task:

* nominal model ``f(x, u) = x + u``, start ``x_0 = 0``, horizon 150;
* unknown part ``g(x) = 1.5 sin(2 x)`` and process noise std 0.1;
* reference ``x_ref_t = 2.5 sin(2 pi t / 75)``, cost ``(x_t - x_ref_t)^2``;
* 100 prior measurements from ten 10-step episodes of the regulator
  ``u = -x`` started uniformly in ``[-0.5, 0.5]``
  (:func:`generate_prior_data`, seed 0).
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Dict

import numpy as np

from .datasets import PriorData
from .exceptions import InvalidArgumentError

DATA_DIR = Path(__file__).parent / "data"
BENCHMARK_CONFIG = DATA_DIR / "benchmark.yaml"


def _lookup(catalog, kind, what):
    try:
        return catalog[kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown {what} {kind!r}; known: {sorted(catalog)}") from None


# nominal models f(x, u) on (B, n_x), (B, n_u) arrays

def additive_model():
    """``f(x, u) = x + u`` (requires ``n_u == n_x``)."""
    return lambda x, u: x + u


def linear_model(a=1.0, b=1.0):
    """``f(x, u) = a x + b u`` with scalar or matrix ``a``, ``b``."""
    A, Bm = np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float))

    def f(x, u):
        fx = x * A[0, 0] if A.size == 1 else x @ A.T
        fu = u * Bm[0, 0] if Bm.size == 1 else u @ Bm.T
        return fx + fu

    return f


PRIOR_MODELS: Dict[str, Callable] = {"additive": additive_model, "linear": linear_model}


def make_prior_model(kind, **params):
    return _lookup(PRIOR_MODELS, kind, "prior model")(**params)


# ground-truth g(x, u); the state enters through its first coordinates

def sine_g(amplitude=1.5, frequency=2.0):
    """``g(x) = amplitude * sin(frequency * x)`` applied per state coordinate."""
    return lambda x, u: amplitude * np.sin(frequency * x)


def linear_g(gain=0.1):
    """``g(x) = gain * x``."""
    return lambda x, u: gain * x


def zero_g():
    return lambda x, u: np.zeros_like(x)


TRUE_FUNCTIONS: Dict[str, Callable] = {"sine": sine_g, "linear": linear_g, "zero": zero_g}


def make_true_g(kind, **params):
    return _lookup(TRUE_FUNCTIONS, kind, "true function")(**params)


# reference trajectories, arrays of shape (N + 1,)

def sine_reference(horizon, amplitude=2.5, period=75.0, phase=0.0):
    t = np.arange(horizon + 1)
    return amplitude * np.sin(2.0 * np.pi * t / period + phase)


def constant_reference(horizon, value=0.0):
    return np.full(horizon + 1, float(value))


REFERENCES: Dict[str, Callable] = {"sine": sine_reference, "constant": constant_reference}


def make_reference(kind, horizon, **params) -> np.ndarray:
    return _lookup(REFERENCES, kind, "reference")(horizon, **params)


def generate_prior_data(true_g, prior_model, process_noise_std, state_dim=1, episodes=10, steps=10,
                        x0_range=0.5, seed=0) -> PriorData:
    """Measurements of the true system under the regulator ``u = -x``.

    Each episode starts uniformly in ``[-x0_range, x0_range]^n`` and runs
    ``steps`` steps; targets are ``x_next - f(x, u)``.
    """
    rng = np.random.default_rng(seed)
    sw = np.broadcast_to(np.asarray(process_noise_std, dtype=float), (state_dim,))
    inputs, targets = [], []
    for _ in range(int(episodes)):
        x = rng.uniform(-x0_range, x0_range, size=(1, state_dim))
        for _ in range(int(steps)):
            u = -x
            fx = np.asarray(prior_model(x, u), dtype=float)
            x_next = fx + np.asarray(true_g(x, u), dtype=float) + sw * rng.standard_normal((1, state_dim))
            inputs.append(np.concatenate([x, u], axis=1)[0])
            targets.append((x_next - fx)[0])
            x = x_next
    return PriorData(np.array(inputs), np.array(targets))
