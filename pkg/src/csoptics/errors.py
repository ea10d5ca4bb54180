"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """An operator or pipeline was constructed with inconsistent parameters."""


class ValidationError(ValueError):
    """Runtime data failed a precondition (non-finite values, bad shapes, ...)."""


class UnsupportedRegularizerError(ValueError):
    """The solver was asked for a regularizer it does not implement."""


class CgConvergenceError(RuntimeError):
    """Conjugate gradients stopped before reaching the requested tolerance.

    Carries the last relative residual as ``residual``.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class NotConvergedError(RuntimeError):
    """A gradient was requested for a solution the solver did not converge to."""


class ModelError(RuntimeError):
    """The physical forward model produced invalid output (NaN fields, ...)."""


class StepError(RuntimeError):
    """An outer optimization step could not produce a usable gradient."""


class SchemaError(ValueError):
    """A run configuration failed schema validation.

    ``diagnostics`` is a list of human-readable problem descriptions.
    """

    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)
