"""Minimal sets of Koopman eigenfunctions: analytic flowbox charts and learned unit manifolds."""

from .dynamics import LinearSystem, VectorField, get_system, integrate_orbit
from .linear_analysis import analytic_charts, chart_velocity, eigendecompose
from .timemaps import independence_test, timemap_from_kef
from .unitnet import TrainingConfig, flowbox_from_unit_manifolds, train
from .validation import GridSpec, foliation_check, residual_field, validate_chart

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "LinearSystem",
    "TrainingConfig",
    "VectorField",
    "analytic_charts",
    "chart_velocity",
    "eigendecompose",
    "flowbox_from_unit_manifolds",
    "foliation_check",
    "get_system",
    "independence_test",
    "integrate_orbit",
    "residual_field",
    "timemap_from_kef",
    "train",
    "validate_chart",
]
