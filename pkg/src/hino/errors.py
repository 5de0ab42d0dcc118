"""Exception types raised across the package."""


class HinoError(ValueError):
    """Base class for all package errors."""


class NotAntisymmetric(HinoError):
    pass


class NotUnitAxis(HinoError):
    pass


class InvalidDt(HinoError):
    pass


class DegenerateLandmarks(HinoError):
    """Landmark second-moment matrix has two or more vanishing eigenvalues."""


class InsufficientLandmarks(HinoError):
    """Fewer than three non-collinear landmarks measured at an event."""


class NonFiniteState(HinoError):
    pass


class SingularInnovationCovariance(HinoError):
    pass


class NonMonotoneTime(HinoError):
    pass


class LostPositivity(HinoError):
    """Riccati matrix lost positive definiteness during a flow step."""


class WindowTooShort(HinoError):
    pass


class InfeasibleLMI(HinoError):
    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class InfeasibleStep1(HinoError):
    pass


class MaxIterationsExceeded(HinoError):
    pass


class MuTooSmall(HinoError):
    pass


class UnknownLandmarkId(HinoError):
    pass


class MalformedRow(HinoError):
    pass


class ConfigError(HinoError):
    pass
