"""Hot-kernel backend selection.

The compiled Cython core is preferred when present; the pure-numpy fallback
is selected when the extension is missing or when OCCLUME_PURE is set to a
non-empty value other than "0". Both backends are bitwise-equivalent.
"""

import os

from occlume._kernels import _numpy

if os.environ.get("OCCLUME_PURE", "0") not in ("", "0"):
    _impl = _numpy
else:
    try:
        from occlume._kernels import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _numpy

BACKEND = "compiled" if _impl is not _numpy else "numpy"

farthest_point_sample = _impl.farthest_point_sample
knn = _impl.knn
nearest_neighbor = _impl.nearest_neighbor
zbuffer_scatter = _impl.zbuffer_scatter
