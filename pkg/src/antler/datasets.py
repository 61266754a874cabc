"""Measurement datasets collected before the control design."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, InvalidArgumentError

TARGET_MODES = ("increment", "raw_next_state")


@dataclass(frozen=True, eq=False)
class PriorData:
    """Measurements ``(x, u) -> x_next - f(x, u)`` taken before deployment.

    Attributes
    ----------
    inputs : ndarray, shape (P, state_dim + input_dim)
        Augmented states.
    targets : ndarray, shape (P, state_dim)
        Increments not explained by the nominal model.
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        X = np.array(self.inputs, dtype=float, ndmin=2)
        Y = np.array(self.targets, dtype=float, ndmin=2)
        if X.shape[0] != Y.shape[0]:
            raise InvalidArgumentError(f"{X.shape[0]} inputs but {Y.shape[0]} targets")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidArgumentError("prior data must be finite")
        X.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    @classmethod
    def empty(cls, state_dim, input_dim):
        return cls(np.zeros((0, state_dim + input_dim)), np.zeros((0, state_dim)))

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def state_dim(self):
        return self.targets.shape[1]

    @property
    def input_dim(self):
        return self.inputs.shape[1] - self.targets.shape[1]

    def to_csv(self, path=None):
        """Write with header ``x_1..x_n,u_1..u_m,y_1..y_n`` (increment targets)."""
        n, m = self.state_dim, self.input_dim
        header = [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(m)] + [f"y_{i + 1}" for i in range(n)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for xu, y in zip(self.inputs, self.targets):
            writer.writerow([repr(float(v)) for v in np.concatenate([xu, y])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _expected_header(state_dim, input_dim):
    return ([f"x_{i + 1}" for i in range(state_dim)] + [f"u_{i + 1}" for i in range(input_dim)]
            + [f"y_{i + 1}" for i in range(state_dim)])


def ingest_prior_data(path, state_dim, input_dim, targets="increment", prior_model=None) -> PriorData:
    """Read and validate a prior-measurement CSV.

    Parameters
    ----------
    path : str or Path
    state_dim, input_dim : int
    targets : {"increment", "raw_next_state"}
        ``increment`` means the ``y`` columns already hold
        ``x_next - f(x, u)``; ``raw_next_state`` means they hold ``x_next``
        and ``prior_model`` is subtracted here.
    prior_model : callable, optional
        ``f(x, u)`` on arrays; required for ``raw_next_state``.

    Raises
    ------
    ConfigError
        On a wrong header, a row of the wrong arity or a non-numeric cell;
        the message names the offending line.
    """
    if targets not in TARGET_MODES:
        raise ConfigError(f"targets must be one of {TARGET_MODES}, got {targets!r}")
    if targets == "raw_next_state" and prior_model is None:
        raise ConfigError("raw_next_state targets need the prior model to form increments")
    expected = _expected_header(state_dim, input_dim)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: file is empty, expected header {','.join(expected)}", line=1)
        header = [h.strip() for h in header]
        if header != expected:
            raise ConfigError(f"{path}: header {header} does not match {expected}", line=1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise ConfigError(f"{path}: row has {len(row)} fields, expected {len(expected)}", line=line)
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise ConfigError(f"{path}: non-numeric value in row {row}", line=line)
            if not np.all(np.isfinite(values)):
                raise ConfigError(f"{path}: non-finite value in row", line=line)
            rows.append(values)
    data = np.array(rows, dtype=float).reshape(-1, len(expected))
    nxu = state_dim + input_dim
    inputs, y = data[:, :nxu], data[:, nxu:]
    if targets == "raw_next_state" and len(data):
        y = y - np.asarray(prior_model(inputs[:, :state_dim], inputs[:, state_dim:]), dtype=float)
    return PriorData(inputs, y)
