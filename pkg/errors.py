"""Exception hierarchy shared by every acss module."""

import numpy as np


class AcssError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(AcssError, ValueError):
    """Parameter or data outside the model's open domain."""


class DimensionError(AcssError, ValueError):
    """Inconsistent lengths or shapes between arguments."""


class KnotError(AcssError, ValueError):
    """Second derivative of a penalty requested at a non-differentiability knot."""


class SingularDesignError(AcssError, np.linalg.LinAlgError):
    """Design matrix is rank deficient where full column rank is required."""


class NotPositiveDefiniteError(AcssError):
    """Restricted second-order matrix is not positive definite."""


class AbsoluteContinuityError(AcssError):
    """Proposal density vanishes at a point where the target density is positive."""


class ConvergenceError(AcssError):
    """An iterative solver failed to reach its tolerance."""


class ConfigError(AcssError, ValueError):
    """Invalid experiment or run configuration."""
