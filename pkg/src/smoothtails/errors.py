"""Exception hierarchy shared by all modules.

Each error class carries the process exit code the command-line front end
maps it to.
"""


class SmoothTailsError(Exception):
    exit_code = 1


class ConfigError(SmoothTailsError, ValueError):
    """Invalid model configuration or unsupported parameter combination."""

    exit_code = 2


class UsageError(ConfigError):
    """An operation was called on a model it does not apply to."""


class EstimationError(SmoothTailsError, RuntimeError):
    """A Monte Carlo or numerical estimate could not be formed."""

    exit_code = 3


class ConvergenceError(EstimationError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConsistencyError(EstimationError):
    """An estimate contradicts a sign or positivity property it must have."""


class ProvenanceError(SmoothTailsError):
    """Inputs were produced from a different configuration than claimed."""

    exit_code = 4
