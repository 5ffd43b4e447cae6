"""Hot-kernel dispatch.

The package ships two implementations of its inner-loop kernels: a
numba-jitted one and a pure-numpy fallback. Selection happens once at
import time:

* default: use numba when it imports cleanly;
* ``CROSSDIFF_DISABLE_NUMBA=1`` (or ``true``/``yes``): force the numpy path.

``BACKEND`` records which one is active. ``benchmarks/bench_kernels.py``
times the two side by side.
"""

import os

_disable = os.environ.get("CROSSDIFF_DISABLE_NUMBA", "").strip().lower()
_FORCE_NUMPY = _disable in ("1", "true", "yes")

if _FORCE_NUMPY:
    from . import numpy_impl as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - exercised only without numba
        from . import numpy_impl as _impl

        BACKEND = "numpy"

conv_out_size = _impl.conv_out_size
im2col = _impl.im2col
col2im = _impl.col2im
propagate_steps = _impl.propagate_steps
staple_estep = _impl.staple_estep
stamp_disks = _impl.stamp_disks

__all__ = [
    "BACKEND",
    "conv_out_size",
    "im2col",
    "col2im",
    "propagate_steps",
    "staple_estep",
    "stamp_disks",
]
