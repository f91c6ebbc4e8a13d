"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """Raised when an input violates an operation's preconditions."""


class NumericalBlowupError(FloatingPointError):
    """Raised when a time integration produces non-finite values.

    ``step`` is the index of the first step whose output was non-finite.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SingularSystemError(ArithmeticError):
    """Raised when a regression system cannot be solved."""


class UnsupportedConfigurationError(ValueError):
    """Raised when a model configuration cannot be handled by an operation."""


class TrainingDivergedError(RuntimeError):
    """Raised when training cannot recover from repeated blowups.

    The partial loss history is kept on ``history``.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
