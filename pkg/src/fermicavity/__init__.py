"""Diffraction of degenerate fermionic atoms by quantized cavity light."""

from .config import FieldKind, FieldSpec, Quantization, Regime, SimulationConfig
from .errors import ConfigError, FermiCavityError, IncompatibleSolverError, NumericalError

__all__ = [
    "ConfigError",
    "FermiCavityError",
    "FieldKind",
    "FieldSpec",
    "IncompatibleSolverError",
    "NumericalError",
    "Quantization",
    "Regime",
    "SimulationConfig",
]
__version__ = "0.1.0"
