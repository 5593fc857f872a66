"""Scaled and gradient-constrained MMD: kernels with derivatives, critic nets,
discrepancy estimators, a small QCQP solver and toy GAN dynamics."""
from . import convex, dynamics, estimators, kernels, nets
from ._backend import BACKEND
from .errors import DegenerateError, InputError, NumericalError, UsageError

__version__ = "0.1.0"

__all__ = ["convex", "dynamics", "estimators", "kernels", "nets", "BACKEND",
           "DegenerateError", "InputError", "NumericalError", "UsageError", "__version__"]
