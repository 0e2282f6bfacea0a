"""Frequency-domain tools over the (T, H, W) axes of a latent.

Spectra are DC-centred (``fftshift``) so that masks can be written in terms
of the distance to the volume centre. The forward transform is unnormalized,
the inverse carries ``1 / (T*H*W)``.
"""
import numpy as np

_AXES = (1, 2, 3)
DEFAULT_CUTOFF = 0.25


def fft3(x):
    """Centred 3-D DFT of every channel."""
    return np.fft.fftshift(np.fft.fftn(x, axes=_AXES), axes=_AXES)


def ifft3(spectrum):
    """Inverse of :func:`fft3`; returns the complex result."""
    return np.fft.ifftn(np.fft.ifftshift(spectrum, axes=_AXES), axes=_AXES)


def _normalized_frequencies(n):
    # Nyquist sits at magnitude 1 on every axis.
    return np.fft.fftshift(np.fft.fftfreq(n)) * 2.0


def radial_frequency(dims):
    """Euclidean distance of each centred bin from DC, Nyquist = 1 per axis."""
    grids = np.meshgrid(*(_normalized_frequencies(n) for n in dims), indexing="ij")
    return np.sqrt(sum(g**2 for g in grids))


def gaussian_lowpass_mask(dims, d0=DEFAULT_CUTOFF):
    """``exp(-r^2 / (2 d0^2))`` on the centred (T, H, W) grid."""
    if not d0 > 0:
        raise ValueError(f"cutoff d0 must be positive, got {d0}")
    dims = tuple(int(n) for n in dims)
    r = radial_frequency(dims)
    return np.exp(-(r**2) / (2.0 * d0**2))


def ideal_lowpass_mask(dims, d0=DEFAULT_CUTOFF):
    """Hard cutoff: 1 inside radius ``d0``, 0 outside."""
    if not d0 > 0:
        raise ValueError(f"cutoff d0 must be positive, got {d0}")
    return (radial_frequency(tuple(int(n) for n in dims)) <= d0).astype(np.float64)


def _check_mask(mask, shape):
    if mask.shape != tuple(shape[1:]):
        raise ValueError(f"mask shape {mask.shape} does not match latent {shape}")


def freq_recombine(low_src, high_src, mask, renormalize=False):
    """Take the band ``mask`` from ``low_src`` and the rest from ``high_src``.

    With ``renormalize`` the spectrum is divided by ``sqrt(M^2 + (1-M)^2)``,
    which keeps white-noise inputs white; the default applies the plain mix.
    """
    if low_src.shape != high_src.shape:
        raise ValueError(f"source shapes differ: {low_src.shape} vs {high_src.shape}")
    _check_mask(mask, low_src.shape)
    mixed = mask * fft3(low_src) + (1.0 - mask) * fft3(high_src)
    if renormalize:
        mixed = mixed / np.sqrt(mask**2 + (1.0 - mask) ** 2)
    out = ifft3(mixed)
    return out.real.astype(low_src.dtype, copy=False)


def low_freq_energy_ratio(x, mask):
    """Channel-averaged share of spectral energy passed by ``mask`` (squared)."""
    _check_mask(mask, x.shape)
    power = np.abs(fft3(x)) ** 2
    total = power.sum(axis=_AXES)
    if np.any(total == 0):
        raise ValueError("input channel has zero spectral energy")
    passed = (mask**2 * power).sum(axis=_AXES)
    return float(np.mean(passed / total))


def temporal_correlation(x):
    """Mean Pearson correlation between adjacent frames, over channels and pairs.

    Pairs where either frame is constant are skipped.
    """
    if x.ndim != 4 or x.shape[1] < 2:
        raise ValueError(f"need a (C, T>=2, H, W) latent, got shape {x.shape}")
    frames = x.reshape(x.shape[0], x.shape[1], -1).astype(np.float64)
    frames = frames - frames.mean(axis=2, keepdims=True)
    norms = np.linalg.norm(frames, axis=2)
    a, b = frames[:, :-1], frames[:, 1:]
    na, nb = norms[:, :-1], norms[:, 1:]
    valid = (na > 0) & (nb > 0)
    if not np.any(valid):
        raise ValueError("every adjacent frame pair has a constant frame")
    corr = np.einsum("ctk,ctk->ct", a, b)[valid] / (na[valid] * nb[valid])
    return float(np.mean(corr))
