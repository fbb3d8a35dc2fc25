"""Backend selection for the numeric inner loops.

Imports the compiled extension when it built successfully, otherwise
falls back to the numpy implementation.  Setting the environment
variable SEPDIAR_NO_ACCEL (to anything non-empty) forces the fallback,
which is handy for debugging and for benchmarking the two side by side.
"""

import os

from . import _kernels_py

if os.environ.get("SEPDIAR_NO_ACCEL"):
    _impl = _kernels_py
    HAVE_ACCEL = False
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        HAVE_ACCEL = True
    except ImportError:
        _impl = _kernels_py
        HAVE_ACCEL = False

BACKEND = _impl.BACKEND
diag_power = _impl.diag_power
nll_quad_sum = _impl.nll_quad_sum
iss_step = _impl.iss_step
mu_psd_stats = _impl.mu_psd_stats
mu_gain_stats = _impl.mu_gain_stats

__all__ = [
    "BACKEND",
    "HAVE_ACCEL",
    "diag_power",
    "nll_quad_sum",
    "iss_step",
    "mu_psd_stats",
    "mu_gain_stats",
]
