"""Polarimetric SAR patch classification on a self-contained autodiff core.

The pipeline: scattering matrices -> Pauli coherency matrices -> nine
amplitude/phase (or real/imaginary) channels -> two-branch multi-task CNN
-> per-class accuracy, AA, OA, Kappa and F1 reports. Everything runs on
numpy; there is no external deep-learning dependency.
"""

from .tensor import (
    DOUBLE,
    SINGLE,
    NumericalError,
    ShapeError,
    Tensor,
    make_rng,
    no_grad,
    set_debug_checks,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericalError",
    "SINGLE",
    "DOUBLE",
    "make_rng",
    "no_grad",
    "set_debug_checks",
    "__version__",
]
