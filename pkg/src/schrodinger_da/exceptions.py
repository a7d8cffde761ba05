"""Exception types shared across the package."""


class ModelError(ValueError):
    """Invalid model construction (bad covariance, shapes, parameters)."""


class StepError(FloatingPointError):
    """A time step produced non-finite or exploding values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegeneracyError(FloatingPointError):
    """All importance weights vanished; the filter has collapsed."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, violation=float("nan"), n_iter=0):
        super().__init__(message)
        self.violation = violation
        self.n_iter = n_iter


class ConfigError(ValueError):
    """Problem with an experiment configuration file."""
