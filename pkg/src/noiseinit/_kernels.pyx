# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops; see ``_kernels_py`` for the reference versions."""
import numpy as np

ctypedef fused real:
    float
    double


def dwconv3d_forward(real[:, :, :, ::1] x, real[:, :, :, ::1] w):
    """Depthwise 3x3x3 convolution, zero padding, output shaped like ``x``."""
    cdef Py_ssize_t C = x.shape[0], T = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c, t, h, v, dt, dh, dv, tt, hh, vv
    cdef double acc
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C, T, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    with nogil:
        for c in range(C):
            for t in range(T):
                for h in range(H):
                    for v in range(W):
                        acc = 0.0
                        for dt in range(3):
                            tt = t + dt - 1
                            if tt < 0 or tt >= T:
                                continue
                            for dh in range(3):
                                hh = h + dh - 1
                                if hh < 0 or hh >= H:
                                    continue
                                for dv in range(3):
                                    vv = v + dv - 1
                                    if vv < 0 or vv >= W:
                                        continue
                                    acc = acc + w[c, dt, dh, dv] * x[c, tt, hh, vv]
                        y[c, t, h, v] = <real>acc
    return out


def dwconv3d_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] w, real[:, :, :, ::1] gy):
    """Adjoints of :func:`dwconv3d_forward` with respect to ``x`` and ``w``."""
    cdef Py_ssize_t C = x.shape[0], T = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c, t, h, v, dt, dh, dv, tt, hh, vv
    cdef double g
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((C, T, H, W), dtype=dtype)
    gw_arr = np.zeros((C, 3, 3, 3), dtype=np.float64)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    with nogil:
        for c in range(C):
            for t in range(T):
                for h in range(H):
                    for v in range(W):
                        g = gy[c, t, h, v]
                        if g == 0.0:
                            continue
                        for dt in range(3):
                            tt = t + dt - 1
                            if tt < 0 or tt >= T:
                                continue
                            for dh in range(3):
                                hh = h + dh - 1
                                if hh < 0 or hh >= H:
                                    continue
                                for dv in range(3):
                                    vv = v + dv - 1
                                    if vv < 0 or vv >= W:
                                        continue
                                    gx[c, tt, hh, vv] += <real>(g * w[c, dt, dh, dv])
                                    gw[c, dt, dh, dv] += g * x[c, tt, hh, vv]
    return gx_arr, gw_arr.astype(dtype, copy=False)


def ema_scan(real[:, :, :, ::1] x, double lam):
    """``y[:, 0] = x[:, 0]``, ``y[:, t] = lam * y[:, t-1] + (1 - lam) * x[:, t]``."""
    cdef Py_ssize_t C = x.shape[0], T = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t c, t, h, v
    cdef double keep = 1.0 - lam
    dtype = np.float32 if real is float else np.float64
    out = np.empty((C, T, H, W), dtype=dtype)
    cdef real[:, :, :, ::1] y = out
    with nogil:
        for c in range(C):
            for h in range(H):
                for v in range(W):
                    y[c, 0, h, v] = x[c, 0, h, v]
            for t in range(1, T):
                for h in range(H):
                    for v in range(W):
                        y[c, t, h, v] = <real>(lam * y[c, t - 1, h, v] + keep * x[c, t, h, v])
    return out
