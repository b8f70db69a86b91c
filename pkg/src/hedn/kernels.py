"""Backend selection for the clustering kernels.

The compiled extension is used when it imports; set ``HEDN_PURE_PYTHON=1``
to force the pure-Python implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("HEDN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

pairwise_distances = _impl.pairwise_distances
dbscan_labels = _impl.dbscan_labels
silhouette_samples = _impl.silhouette_samples

__all__ = ["BACKEND", "pairwise_distances", "dbscan_labels", "silhouette_samples"]
