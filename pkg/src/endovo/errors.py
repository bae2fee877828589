"""Exception types raised across the package."""


class EndoVOError(Exception):
    """Base class for all errors raised by endovo."""


class DimensionError(EndoVOError, ValueError):
    """Tensor shapes do not line up."""


class ConfigurationError(EndoVOError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ValidationError(EndoVOError, ValueError):
    """Input data violates a documented precondition."""


class NumericError(EndoVOError, ArithmeticError):
    """A non-finite value appeared in a computation."""


class StateError(EndoVOError, RuntimeError):
    """An operation was called without the state it needs (e.g. a forward cache)."""


class GeometryError(EndoVOError, ValueError):
    """Camera placement is incompatible with the scene."""


class DegenerateRotationError(EndoVOError, ValueError):
    """A quaternion is too close to zero to normalize."""


class DegenerateCalibrationError(EndoVOError, ValueError):
    """Beta calibration cannot divide by a vanishing orientation loss."""
