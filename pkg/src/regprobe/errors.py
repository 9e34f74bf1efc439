"""Shared exception types."""
from __future__ import annotations


class RegprobeError(Exception):
    """Base class for all errors raised by this package."""


class ModulusDomainError(RegprobeError, ValueError):
    """A modulus was evaluated or integrated outside its domain of validity."""


class RegistryError(RegprobeError, ValueError):
    """An identifier does not name a registered object, or its parameters are malformed."""


class FieldValidationError(RegprobeError, ValueError):
    """A coefficient field violates a structural requirement such as symmetry or ellipticity."""


class DomainError(RegprobeError, ValueError):
    """A requested ball or sample point leaves the domain a field is defined on."""


class ExponentError(RegprobeError, ValueError):
    """An integrability exponent is outside the admissible range."""


class AnisotropyError(RegprobeError, ValueError):
    """The coefficient matrix is too anisotropic for the discretization to stay monotone."""


class SolverError(RegprobeError, RuntimeError):
    """The linear solver failed to reach the requested residual.

    Carries the residual history of the failed run so callers can report it.
    """

    def __init__(self, message: str, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


class FixedPointError(RegprobeError, RuntimeError):
    """The outer fixed-point iteration failed to contract.

    Carries the history of successive sup-norm differences.
    """

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = list(history or [])


class FitError(RegprobeError, ValueError):
    """A least-squares fit was rank deficient or otherwise unusable."""


class CalibrationError(RegprobeError, RuntimeError):
    """A constant-calibration regression was degenerate or produced nonsense."""


class ScenarioError(RegprobeError, ValueError):
    """A scenario file is malformed or references unknown components."""


class SchemaVersionError(ScenarioError):
    """A persisted artifact declares an unsupported schema version."""
