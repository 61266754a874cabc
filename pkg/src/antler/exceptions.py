"""Exception hierarchy shared across the package."""


class AntlerError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(AntlerError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(AntlerError, ArithmeticError):
    """A linear-algebra step failed (singular Gram matrix, degenerate update).

    Parameters
    ----------
    message : str
        Human readable description.
    diagnostics : dict, optional
        Extra context such as the smallest pivot or a condition estimate.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DivergenceError(AntlerError):
    """A closed-loop rollout left the admissible state region.

    Attributes
    ----------
    trajectory : int or None
        Index of the offending trajectory within its batch.
    step : int
        Time step at which the state first became non-finite or exceeded
        the divergence bound.
    """

    def __init__(self, message, step, trajectory=None):
        super().__init__(message)
        self.step = int(step)
        self.trajectory = None if trajectory is None else int(trajectory)


class ConfigError(AntlerError):
    """Experiment configuration could not be parsed or validated."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
