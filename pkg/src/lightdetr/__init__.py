"""Lightweight detection transformer pipeline on numpy."""
from .kernels import BACKEND
from .tensor import NonFiniteError, OpCounters, counting

__version__ = "0.1.0"

__all__ = ["BACKEND", "NonFiniteError", "OpCounters", "counting", "__version__"]
