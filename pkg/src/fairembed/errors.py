"""Exception hierarchy; the CLI maps each family to a distinct exit code."""


class FairEmbedError(Exception):
    """Base class for all package errors."""


class ConfigError(FairEmbedError, ValueError):
    """Invalid configuration or parameter set (exit code 2)."""


class NumericError(FairEmbedError, ArithmeticError):
    """Numerical failure: divergence, non-convergence, degenerate input (exit code 3)."""


class DegenerateCovarianceError(NumericError):
    pass


class ConvergenceError(NumericError):
    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class InsufficientDataError(NumericError, ValueError):
    pass


class SingularConfigurationError(NumericError, ValueError):
    pass
