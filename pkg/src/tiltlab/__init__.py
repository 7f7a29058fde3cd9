"""Numerical laboratory for tilted fluids on de Sitter-like S^3 cosmologies."""

from .params import SoundSpeedParams, derive_params, classify_regime, rate_table, Regime

__version__ = "0.1.0"

__all__ = ["SoundSpeedParams", "derive_params", "classify_regime", "rate_table", "Regime", "__version__"]
