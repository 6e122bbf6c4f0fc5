"""Exception hierarchy shared by the simulation and numerics modules."""

from __future__ import annotations


class TraitBranchError(Exception):
    """Base class for all package errors."""


class ConfigError(TraitBranchError, ValueError):
    """Invalid model or experiment configuration."""


class MeshConditionError(ConfigError):
    """The trait mesh violates delta_K < 1/ln K."""


class KernelError(ConfigError):
    """Kernel lacks a declared super-exponential tail bound."""


class BoundaryError(ConfigError):
    """Mutation mass left the window under the ``strict`` boundary policy."""


class NumericalDiagnostic(TraitBranchError, ArithmeticError):
    """Base class for numerical failures (CLI exit code 3)."""


class SaturationError(NumericalDiagnostic, OverflowError):
    """An exponential moment left the representable range."""


class ExponentOverflowError(NumericalDiagnostic, OverflowError):
    """Shifted exponentials in the exponent system overflowed."""


class StiffnessError(NumericalDiagnostic):
    """Adaptive step size underflowed."""


class CFLError(NumericalDiagnostic):
    """A requested time step violates the monotonicity bound."""

    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class SchemeDisagreementError(NumericalDiagnostic):
    """The two Hamilton-Jacobi schemes disagree beyond tolerance."""


class PopulationCapError(NumericalDiagnostic):
    """Total population exceeded the configured cap."""


class LeapBoundError(NumericalDiagnostic):
    """Tau-leap step too large for the configured relative leap bound."""


class WindowBudgetError(NumericalDiagnostic):
    """Second-moment system exceeds the window budget."""


class DataInconsistencyError(TraitBranchError, ValueError):
    """Stochastic output is inconsistent with the supplied mean field."""
