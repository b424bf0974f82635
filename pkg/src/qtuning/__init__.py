"""Continual prompt tuning over a frozen encoder with a bounded, PCA-evicted prompt queue."""
from .numkernel import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
