"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np

_OFFSETS = [(dt, dh, dv) for dt in range(3) for dh in range(3) for dv in range(3)]


def _window(padded, dt, dh, dv, shape):
    _, t, h, w = shape
    return padded[:, dt:dt + t, dh:dh + h, dv:dv + w]


def dwconv3d_forward(x, w):
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros_like(x)
    for dt, dh, dv in _OFFSETS:
        out += w[:, dt, dh, dv, None, None, None] * _window(padded, dt, dh, dv, x.shape)
    return out


def dwconv3d_backward(x, w, gy):
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    gpad = np.zeros_like(padded)
    gw = np.empty_like(w)
    for dt, dh, dv in _OFFSETS:
        gw[:, dt, dh, dv] = np.einsum(
            "cthw,cthw->c", gy, _window(padded, dt, dh, dv, x.shape)
        )
        _window(gpad, dt, dh, dv, x.shape)[...] += w[:, dt, dh, dv, None, None, None] * gy
    return gpad[:, 1:-1, 1:-1, 1:-1].copy(), gw


def ema_scan(x, lam):
    out = np.empty_like(x)
    out[:, 0] = x[:, 0]
    for t in range(1, x.shape[1]):
        out[:, t] = lam * out[:, t - 1] + (1.0 - lam) * x[:, t]
    return out
