"""Exception types raised across the package."""

from __future__ import annotations


class RiskModelError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(RiskModelError, ValueError):
    """Input data does not satisfy a structural invariant."""


class EvaluationError(RiskModelError, RuntimeError):
    """A numerical routine could not produce a value."""


class MalformedTree(ValidationError):
    pass


class BadProbabilities(ValidationError):
    pass


class BadMu(ValidationError):
    pass


class TimeOrder(ValidationError):
    pass


class BadDensity(ValidationError):
    pass


class MeasurabilityViolation(ValidationError):
    pass


class NotSupermartingale(ValidationError):
    pass


class BadStart(ValidationError):
    pass


class Negative(ValidationError):
    pass


class NotMartingale(ValidationError):
    pass


class BadGamma(ValidationError):
    pass


class NotAbsContinuous(ValidationError):
    pass


class BadParameters(ValidationError):
    pass


class BadTermStructure(ValidationError):
    pass


class UnsupportedKind(ValidationError):
    pass


class UnsupportedInner(ValidationError):
    pass


class ZeroDiscount(EvaluationError):
    pass


class OptimizerFailed(EvaluationError):
    pass


class InfeasibleFamily(EvaluationError):
    pass


class InconsistentInput(EvaluationError):
    pass


class InfinitePenalty(EvaluationError):
    pass
