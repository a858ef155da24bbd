"""Simulation and verification tools for the M/H2/n+M queue in the Halfin-Whitt regime."""

from .model import (
    AssumptionWarning,
    ExponentReport,
    HyperExp2,
    ModelError,
    SystemParams,
    counterexample_a,
    counterexample_b,
    exponents,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionWarning",
    "ExponentReport",
    "HyperExp2",
    "ModelError",
    "SystemParams",
    "counterexample_a",
    "counterexample_b",
    "exponents",
    "__version__",
]
