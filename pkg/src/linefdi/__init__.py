"""Observer-based fault detection, classification and location for a three-phase line."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
