"""Exception hierarchy shared by the numerical modules and the command line."""
from __future__ import annotations

from typing import Optional

import numpy as np


class DyadicError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 3


class DomainInputError(DyadicError, ValueError):
    """Malformed domain document or a point of the wrong dimension."""

    exit_code = 2


class ConfigurationError(DyadicError, ValueError):
    """A precondition gate refused the requested parameters."""

    exit_code = 2

    def __init__(self, message: str, condition: Optional[str] = None):
        super().__init__(message)
        self.condition = condition


class ScaleRangeError(DyadicError, ValueError):
    """A scale parameter lies outside the admissible range."""


class BracketError(DyadicError):
    """Bisection could not bracket the requested level."""

    def __init__(self, message: str, bound: float):
        super().__init__(message)
        self.bound = bound


class BandExitError(DyadicError):
    """A flow trajectory left the neighbourhood band of the boundary."""

    def __init__(self, message: str, last_state: Optional[np.ndarray] = None):
        super().__init__(message)
        self.last_state = last_state


class IntegrationError(DyadicError):
    """The flow residual did not reach tolerance within the step cap."""


class ProjectionError(DyadicError):
    """The nearest point projection failed to converge."""


class SingularityError(DyadicError):
    """The gradient of the defining function is too small."""


class EmptyRegionError(DyadicError):
    """A region contains no quadrature nodes or Monte Carlo hits."""


class AccuracyError(DyadicError):
    """A series evaluation was requested outside its accuracy compacta."""


class DiagnosticError(DyadicError):
    """Too many samples were discarded for the estimate to be trusted."""
