"""Structured error types shared across the package.

Every error raised on a contract violation carries enough context in its
message to identify the offending input (dimension, class id, parameter name).
The CLI maps any BalsegError to a nonzero exit code.
"""


class BalsegError(Exception):
    """Base class for all structured errors raised by balseg."""


class ShapeError(BalsegError):
    """An array argument has an incompatible shape or dimension."""


class ConfigError(BalsegError):
    """A configuration object violates one of its invariants."""


class DataError(BalsegError):
    """A dataset, patch, or profile violates one of its invariants."""


class InfeasibleScheduleError(BalsegError):
    """No batch plan satisfying the coverage constraints exists."""


class OptimizerError(BalsegError):
    """The optimizer received invalid state (e.g. a NaN gradient)."""
