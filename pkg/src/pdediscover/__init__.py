"""PDE discovery from low-resolution noisy measurements.

Three stages: a physics-encoded recurrent network reconstructs a
high-resolution trajectory, sequential threshold ridge regression picks
terms from a polynomial-derivative library, and the identified PDE's
coefficients are refined inside a recurrent physics model.
"""

__version__ = "0.1.0"

from .errors import (InvalidArgumentError, NumericalBlowupError, SingularSystemError, StageError,
                     TrainingDivergedError, UnsupportedConfigurationError)

__all__ = [
    "__version__", "InvalidArgumentError", "NumericalBlowupError", "SingularSystemError", "StageError",
    "TrainingDivergedError", "UnsupportedConfigurationError",
]
