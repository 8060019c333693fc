"""Hot geometry/raster kernels.

The compiled extension is used when it was built; otherwise the pure-Python
module is selected. Set ``BC2CHAT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("BC2CHAT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"

pixel_span = backend.pixel_span
raster_rects = backend.raster_rects
intersection_area = backend.intersection_area
first_overlap = backend.first_overlap
quantize_bins = backend.quantize_bins

__all__ = [
    "BACKEND_NAME",
    "backend",
    "compiled_backend",
    "python_backend",
    "pixel_span",
    "raster_rects",
    "intersection_area",
    "first_overlap",
    "quantize_bins",
]
