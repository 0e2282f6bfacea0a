"""Dense rank-4 tensor arithmetic.

Latents are plain ``numpy`` arrays of shape ``(C, T, H, W)`` in C order, so
W is the fastest axis. Modes are numbered 1..4 for (c, t, h, w) as in the
usual mode-n product notation.

Precision is float64 unless the ``NOISEINIT_DTYPE`` environment variable
selects ``float32`` for production runs.
"""
import os

import numpy as np

DTYPE = np.dtype(os.environ.get("NOISEINIT_DTYPE", "float64"))
if DTYPE not in (np.float32, np.float64):
    raise ImportError(f"NOISEINIT_DTYPE must be float32 or float64, got {DTYPE}")

_TWO_PI = 2.0 * np.pi


def _check_dims(dims):
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ValueError(f"expected 4 dims (C, T, H, W), got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be >= 1, got {dims}")
    return dims


def _check_mode(mode):
    if mode not in (1, 2, 3, 4):
        raise ValueError(f"mode must be in 1..4, got {mode!r}")
    return mode - 1


def standard_normal(n, seed):
    """Return ``n`` standard normal float64 values for ``seed``.

    The stream is Box-Muller over the raw 64-bit output of PCG64 seeded with
    ``seed``: each pair of draws ``a, b`` becomes uniforms
    ``u = ((a >> 11) + 1) * 2**-53`` in (0, 1] and the pair
    ``sqrt(-2 ln u1) * (cos, sin)(2 pi u2)``. Only the bit generator is
    relied on, so the values do not depend on numpy's Generator algorithms.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    n = int(n)
    pairs = (n + 1) // 2
    raw = np.random.PCG64(seed).random_raw(2 * pairs)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    angle = _TWO_PI * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:n]


def sample_gaussian(dims, seed, dtype=None):
    """Draw an i.i.d. N(0, 1) latent of shape ``dims``, deterministic in ``seed``."""
    dims = _check_dims(dims)
    values = standard_normal(int(np.prod(dims)), seed)
    return values.reshape(dims).astype(dtype or DTYPE, copy=False)


def unfold(x, mode):
    """Mode-n matricization.

    Row ``i`` holds the slice ``x[..., i, ...]`` along ``mode``; columns run over
    the remaining modes in ascending order with the earliest one slowest.
    """
    axis = _check_mode(mode)
    if x.ndim != 4:
        raise ValueError(f"expected a rank-4 tensor, got shape {x.shape}")
    return np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)


def fold(m, mode, dims):
    """Inverse of :func:`unfold`."""
    axis = _check_mode(mode)
    dims = _check_dims(dims)
    rest = dims[:axis] + dims[axis + 1:]
    if m.ndim != 2 or m.shape != (dims[axis], int(np.prod(rest))):
        raise ValueError(
            f"matrix of shape {m.shape} does not fold to {dims} along mode {mode}"
        )
    return np.moveaxis(m.reshape((dims[axis],) + rest), 0, axis)


def mode_product(x, a, mode):
    """Mode-n product ``x ×_mode a``: contract ``a``'s columns with axis ``mode``."""
    axis = _check_mode(mode)
    if x.ndim != 4 or a.ndim != 2:
        raise ValueError(f"bad operand ranks {x.shape} and {a.shape}")
    if a.shape[1] != x.shape[axis]:
        raise ValueError(
            f"matrix with {a.shape[1]} columns cannot act on mode {mode} "
            f"of size {x.shape[axis]}"
        )
    return np.moveaxis(np.tensordot(a, x, axes=(1, axis)), 0, axis)


def svd(m):
    """Thin SVD with a fixed sign convention.

    Returns ``(U, S, V)`` with ``m = U @ diag(S) @ V.T``. Singular values are
    non-increasing, and each left singular vector is flipped so that its
    largest-magnitude entry is positive (ties go to the lowest index).
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains NaN or Inf")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, s, vt.T * signs


def left_singular_vectors(m):
    """Left factor ``U`` of :func:`svd`, without forming ``V``.

    Wide matrices are first reduced by a QR of ``m.T``, so the SVD runs on
    a square ``rows x rows`` factor. Sign convention as in :func:`svd`.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {m.shape}")
    if m.shape[1] <= 2 * m.shape[0]:
        return svd(m)[0]
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains NaN or Inf")
    r = np.linalg.qr(m.T, mode="r")
    u, _, _ = np.linalg.svd(r.T, full_matrices=False)
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs
