"""Data-efficient model-based policy search with GP dynamics models."""

from .beliefs import GaussianBelief
from .errors import (
    DimensionError,
    DivergedRolloutError,
    DomainError,
    GpControlError,
    NotPsdError,
    NumericalError,
)
from .trig import joint_trig_cross_moment, trig_moments, trig_second_moments

__all__ = [
    "GaussianBelief",
    "GpControlError",
    "DomainError",
    "DimensionError",
    "NotPsdError",
    "NumericalError",
    "DivergedRolloutError",
    "trig_moments",
    "trig_second_moments",
    "joint_trig_cross_moment",
]

__version__ = "0.1.0"
