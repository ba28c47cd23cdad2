"""Exception types raised across the package."""

from __future__ import annotations


class KinsegError(Exception):
    """Base class for all package errors."""


class ConfigError(KinsegError):
    """Invalid or inconsistent run configuration."""


class NumericalError(KinsegError):
    """A solver produced an unusable numerical state."""


class InadmissibleExponent(KinsegError, ValueError):
    pass


class NonPositivePoissonScale(KinsegError, ValueError):
    pass


class ZeroDiffusion(KinsegError, ValueError):
    pass


class ZeroTarget(KinsegError, ValueError):
    pass


class CflViolation(NumericalError):
    pass


class ShapeTooLarge(KinsegError, ValueError):
    pass


class AllLossesInfinite(NumericalError):
    pass


class MissingArtifact(KinsegError):
    pass
