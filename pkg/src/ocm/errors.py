"""Exception hierarchy shared across the package.

Each class carries the process exit code the command-line driver maps it to
(2 = configuration, 3 = convergence, 4 = resource).
"""


class OcmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(OcmError):
    """Invalid model file, argument, or experiment configuration."""

    exit_code = 2


class ConvergenceError(OcmError):
    """An iterative solve failed to reach its tolerance."""

    exit_code = 3

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class ResourceError(OcmError):
    """A solve would exceed a configured memory cap."""

    exit_code = 4


class NumericError(OcmError):
    """A numerical routine produced a result outside its accuracy contract."""

    exit_code = 1
