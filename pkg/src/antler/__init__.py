"""Learning-anticipating design of data-independent control parameters."""

__version__ = "0.1.0"
