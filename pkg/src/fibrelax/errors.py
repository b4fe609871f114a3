"""Exception types shared across the fibrelax modules."""

from __future__ import annotations


class FibrelaxError(Exception):
    """Base class for all package errors."""


class ParallelFibers(FibrelaxError, ValueError):
    pass


class NonPositiveMobility(FibrelaxError, ValueError):
    pass


class InvalidParameter(FibrelaxError, ValueError):
    pass


class UnstableStep(FibrelaxError, ArithmeticError):
    pass


class EmptySample(FibrelaxError, ValueError):
    pass


class NegativeConcentration(FibrelaxError, ValueError):
    pass


class IsotropicSingular(FibrelaxError, ArithmeticError):
    pass


class NonPositiveDensity(FibrelaxError, ValueError):
    pass


class CFLViolation(FibrelaxError, ArithmeticError):
    pass


class DensityFloorViolated(FibrelaxError, ArithmeticError):
    pass


class NotElliptic(FibrelaxError, ArithmeticError):
    pass


class MaxIterationsExceeded(FibrelaxError, ArithmeticError):
    pass


class NotConverged(FibrelaxError, ArithmeticError):
    pass


class ConfigInvalid(FibrelaxError, ValueError):
    """Raised with a dotted field path, e.g. ``model.kappa``."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class IoError(FibrelaxError, OSError):
    pass
