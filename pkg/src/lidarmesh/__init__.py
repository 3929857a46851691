"""LiDAR mesh reconstruction with adaptive-truncation TSDF fusion, MRF-based
texturing and semantic face labeling."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
