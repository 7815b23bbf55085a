"""Exception hierarchy shared by every module of the package."""


class ProxSkipVRError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ProxSkipVRError, ValueError):
    """An argument is outside the domain of the operation."""


class InvalidProblemError(ProxSkipVRError, ValueError):
    """The optimization problem violates a structural requirement."""


class InvalidParamsError(ProxSkipVRError, ValueError):
    """Estimator or solver constants are inconsistent."""


class InvalidStateError(ProxSkipVRError, RuntimeError):
    """A quantity was requested that the current state cannot provide."""


class NoConvergenceError(ProxSkipVRError, RuntimeError):
    """An iterative routine exhausted its iteration cap."""


class DivergenceError(ProxSkipVRError, RuntimeError):
    """The iterate became non-finite.

    Attributes:
        trace: the partial run trace up to the last finite iterate, if any.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ParseError(ProxSkipVRError, ValueError):
    """Malformed input file; ``line`` is the 1-based offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ProxSkipVRError, ValueError):
    """Invalid experiment configuration."""
