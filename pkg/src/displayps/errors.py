"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates a documented precondition."""


class BehindCameraError(ValueError):
    """A world point has non-positive depth in the camera frame."""


class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations.

    ``residual`` holds the largest remaining update at the point of failure.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class UndefinedMeanError(ValueError):
    """A mean was requested over an empty mask."""


class DegenerateEntryError(RuntimeError):
    """Every pixel of a training entry is invalid."""
