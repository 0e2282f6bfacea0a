"""Hot loops, backed by the compiled extension when it is importable.

Set ``NOISEINIT_PURE_PYTHON=1`` to force the numpy fallback. ``BACKEND`` names
the implementation in use.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("NOISEINIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"


def _contig(a, dtype):
    return np.ascontiguousarray(a, dtype=dtype)


def dwconv3d_forward(x, w):
    """Depthwise 3x3x3 convolution of ``x`` (C, T, H, W) with ``w`` (C, 3, 3, 3)."""
    if w.shape != (x.shape[0], 3, 3, 3):
        raise ValueError(f"kernel shape {w.shape} does not match {x.shape[0]} channels")
    return _impl.dwconv3d_forward(_contig(x, x.dtype), _contig(w, x.dtype))


def dwconv3d_backward(x, w, gy):
    """Return ``(grad_x, grad_w)`` for upstream gradient ``gy``."""
    dt = x.dtype
    return _impl.dwconv3d_backward(_contig(x, dt), _contig(w, dt), _contig(gy, dt))


def ema_scan(x, lam):
    """Exponential moving average along axis 1 (time) of a (C, T, H, W) array."""
    return _impl.ema_scan(_contig(x, x.dtype), float(lam))
