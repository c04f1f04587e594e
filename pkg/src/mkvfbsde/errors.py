"""Exception types raised by the solvers."""


class MkvError(Exception):
    """Base class for package errors."""


class ModelError(MkvError, ValueError):
    """A model is ill-formed (dimensions, non-affine dynamics, bad parameters)."""


class StateBlowupError(MkvError, FloatingPointError):
    """A simulated path became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class RegressionError(MkvError, ArithmeticError):
    """Backward regression could not be carried out (too few particles)."""


class DivergenceError(MkvError, RuntimeError):
    """An iterative scheme diverged."""


class NonConvergenceError(MkvError, RuntimeError):
    """An iterative scheme stopped without meeting its tolerance.

    ``trace`` holds whatever residual history the scheme recorded.
    """

    def __init__(self, message: str, trace=None):
        self.trace = list(trace or [])
        super().__init__(message)
