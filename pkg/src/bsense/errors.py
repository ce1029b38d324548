"""Exception types raised across the package."""


class BsenseError(Exception):
    """Base class for package errors."""


class GraspMissError(BsenseError, ValueError):
    """No particle lies inside the requested grasp neighborhood."""


class SolverDivergenceError(BsenseError, FloatingPointError):
    """The equilibrium solver produced non-finite positions."""

    def __init__(self, message: str, iteration: int = -1, column: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.column = column


class SingularSystemError(BsenseError, ArithmeticError):
    """A linear system required by a sensitivity or update step is singular."""


class ControllerError(BsenseError, RuntimeError):
    """A controller could not produce an action (e.g. every sample diverged)."""
