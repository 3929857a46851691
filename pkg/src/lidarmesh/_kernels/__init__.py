"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The Cython extension `_native` is preferred when importable; setting the
environment variable LIDARMESH_FORCE_FALLBACK=1 forces the numpy path. Both
backends implement the same contracts and are compared in the test suite and
in benchmarks/bench_kernels.py.

Kernel surface:
  enumerate_updates  -- voxels in the truncation band around each measurement
  apply_updates      -- sequential weighted TSDF averaging
  march_blocks       -- marching cubes over 9x9x9 corner grids
  ray_query_all      -- all ray/triangle hits through a BVH
  ray_any_closer     -- occlusion test: any hit nearer than a limit
  face_gradient_sums -- per-face sums of an image over rasterized triangles
"""

import os

from . import fallback

_FORCED = os.environ.get("LIDARMESH_FORCE_FALLBACK", "") not in ("", "0")

if not _FORCED:
    try:
        from . import _native as _impl
        BACKEND = "native"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"
else:
    _impl = fallback
    BACKEND = "fallback"


def get_backend(name: str):
    """Explicit backend module by name ('native' or 'fallback')."""
    if name == "fallback":
        return fallback
    if name == "native":
        from . import _native
        return _native
    raise ValueError(f"unknown backend {name!r}")


enumerate_updates = _impl.enumerate_updates
apply_updates = _impl.apply_updates
march_blocks = _impl.march_blocks
ray_query_all = _impl.ray_query_all
ray_any_closer = _impl.ray_any_closer
face_gradient_sums = _impl.face_gradient_sums
