"""Exception types raised across the package."""

from __future__ import annotations

import numpy as np


class Fp8ProbeError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(Fp8ProbeError, ValueError):
    pass


class NonFiniteInput(Fp8ProbeError, ValueError):
    pass


class InsufficientSamples(Fp8ProbeError, ValueError):
    pass


class NotPositiveDefinite(Fp8ProbeError, ArithmeticError):
    """Cholesky factorization failed even after jitter escalation."""


# the weight tracker surfaces factorization failures under this name
CholeskyFailure = NotPositiveDefinite


class IndivisibleFeatureDim(Fp8ProbeError, ValueError):
    pass


class EmptyList(Fp8ProbeError, ValueError):
    pass


class FormatVersionMismatch(Fp8ProbeError):
    pass


class CorruptSnapshot(Fp8ProbeError):
    pass


class MalformedReport(Fp8ProbeError, ValueError):
    pass


class MissingPlanEntry(Fp8ProbeError, KeyError):
    pass


class ConfigError(Fp8ProbeError, ValueError):
    pass


def check_finite(a, what: str = "input") -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"{what} contains NaN or Inf")
