"""Gradient inversion attacks on a small self-contained autodiff stack."""

from .attack import AttackConfig, AttackTrace, MeasureConfig, reconstruct
from .errors import ConfigError, FormatError, LabError, NumericError, ShapeError
from .models import build_model, victim_gradients

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackTrace", "MeasureConfig", "reconstruct", "build_model", "victim_gradients",
    "ConfigError", "FormatError", "LabError", "NumericError", "ShapeError",
]
