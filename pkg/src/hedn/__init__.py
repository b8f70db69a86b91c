"""Hard/easy dual-network multi-source domain adaptation for feature-vector
classification."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
