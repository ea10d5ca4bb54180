"""csoptics: matrix-free differentiable compressed-sensing imaging.

End-to-end design of convolutional measurement systems: a physically
modeled PSF forward model, a nested L1/ElasticNet reconstruction solved by
FISTA, exact solution sensitivities through the reconstruction's optimality
conditions, and benchmark harnesses against Gaussian circulant baselines.
"""

from .errors import (
    CgConvergenceError,
    ConfigurationError,
    ModelError,
    NotConvergedError,
    SchemaError,
    StepError,
    UnsupportedRegularizerError,
    ValidationError,
)

__all__ = [
    "CgConvergenceError",
    "ConfigurationError",
    "ModelError",
    "NotConvergedError",
    "SchemaError",
    "StepError",
    "UnsupportedRegularizerError",
    "ValidationError",
]

__version__ = "0.1.0"
