"""Convolution kernel backend selection.

The conv2d forward/backward kernels are the hot inner loops of every
pipeline stage (policy training, mask optimization, rollouts).  Two
interchangeable implementations exist:

* ``numba_kernels`` -- fused im2col loops compiled with ``@njit``,
  calling BLAS for the contraction (default when numba imports).
* ``numpy_kernels`` -- pure numpy: stride-trick patch views plus BLAS
  matmul, no compilation step.

Selection is by the ``PUPPETMASK_BACKEND`` environment variable, read
once at import time: ``numba`` (require numba, error if unavailable),
``numpy`` (force the fallback), or unset (prefer numba, silently fall
back to numpy).  Both backends are deterministic run-to-run on the same
machine; they may differ from each other in the last float32 ulps
because BLAS and loop summation orders differ.

``benchmarks/bench_backends.py`` times both sides on the shapes this
package actually runs.
"""

import os

_requested = os.environ.get("PUPPETMASK_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ValueError(
        f"PUPPETMASK_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from .numpy_kernels import (
        conv2d_forward,
        conv2d_input_grad,
        conv2d_weight_grad,
    )

    BACKEND = "numpy"
else:
    try:
        from .numba_kernels import (
            conv2d_forward,
            conv2d_input_grad,
            conv2d_weight_grad,
        )

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from .numpy_kernels import (
            conv2d_forward,
            conv2d_input_grad,
            conv2d_weight_grad,
        )

        BACKEND = "numpy"

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_input_grad",
    "conv2d_weight_grad",
]
