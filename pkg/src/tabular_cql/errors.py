"""Exception types raised by the package."""

import numpy as np


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class SupportError(ValueError):
    """A distribution puts mass where its reference distribution has none."""


class SingularSystemError(np.linalg.LinAlgError):
    """A linear system is singular or too ill-conditioned to solve."""

    def __init__(self, message: str, condition_number: float = float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


class ConvergenceError(RuntimeError):
    """An iteration hit its sweep limit before reaching tolerance."""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
