"""Kernel backend selection.

The compiled extension is used when it is importable; otherwise the numpy
fallback takes over. Set ``RECOURSE_KIT_KERNELS=python`` (or ``cython``) to
force a backend explicitly, e.g. for benchmarking or debugging.
"""

import os

from . import _pure

_requested = os.environ.get("RECOURSE_KIT_KERNELS", "auto").lower()

if _requested == "python":
    _impl = _pure
elif _requested == "cython":
    from . import _core as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _pure

BACKEND = _impl.BACKEND
box_project = _impl.box_project
box_distance = _impl.box_distance
ball_project = _impl.ball_project
ball_distance = _impl.ball_distance
segment_weighted_mean = _impl.segment_weighted_mean
weighted_power_sum = _impl.weighted_power_sum


def backend():
    """Name of the active kernel backend: 'cython' or 'python'."""
    return BACKEND
