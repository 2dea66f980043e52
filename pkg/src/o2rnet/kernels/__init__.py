"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Set O2RNET_NUMBA=0 to force the numpy implementations (useful for debugging
and as the reference in equivalence tests). The active backend is recorded
in BACKEND.
"""

from __future__ import annotations

import os

from . import _numpy

_flag = os.environ.get("O2RNET_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no", "off")

BACKEND = "numpy"
if _want_numba:
    try:
        from . import _numba

        BACKEND = "numba"
    except ImportError:
        BACKEND = "numpy"

if BACKEND == "numba":
    iou_matrix = _numba.iou_matrix
    nms_indices = _numba.nms_indices
    roi_align_forward = _numba.roi_align_forward
    roi_align_backward = _numba.roi_align_backward
else:
    iou_matrix = _numpy.iou_matrix
    nms_indices = _numpy.nms_indices
    roi_align_forward = _numpy.roi_align_forward
    roi_align_backward = _numpy.roi_align_backward

__all__ = [
    "BACKEND",
    "iou_matrix",
    "nms_indices",
    "roi_align_forward",
    "roi_align_backward",
]
