"""Simulation and numerics for a trait-structured branching process and its
Hamilton-Jacobi limits."""

from .core import (GaussianKernel, ExpSquareKernel, Hamiltonian, Model, TraitGrid, build_grid,
                   classify_regime, discretize_kernel, make_model, verify_assumptions)
from .errors import (ConfigError, NumericalDiagnostic, TraitBranchError)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExpSquareKernel", "GaussianKernel", "Hamiltonian", "Model", "NumericalDiagnostic",
    "TraitBranchError", "TraitGrid", "__version__", "build_grid", "classify_regime", "discretize_kernel",
    "make_model", "verify_assumptions",
]
