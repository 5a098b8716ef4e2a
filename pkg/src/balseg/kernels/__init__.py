"""Backend dispatch for the hot numeric kernels.

The environment variable BALSEG_BACKEND selects the lane:

    BALSEG_BACKEND=numba   use the JIT kernels (default when numba imports)
    BALSEG_BACKEND=numpy   force the pure-numpy fallback

Both lanes implement identical contracts; see benchmarks/bench_backends.py
for a timing comparison.
"""

import os

from . import reference

_requested = os.environ.get("BALSEG_BACKEND", "").strip().lower()

if _requested == "numpy":
    _impl = reference
    BACKEND = "numpy"
elif _requested in ("", "numba"):
    try:
        from . import jit as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = reference
        BACKEND = "numpy"
else:
    raise ValueError(
        f"BALSEG_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

conv3x3_forward = _impl.conv3x3_forward
conv3x3_input_grad = _impl.conv3x3_input_grad
conv3x3_weight_grad = _impl.conv3x3_weight_grad
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
