"""Per-sample Tucker factorization by truncated HOSVD."""
from dataclasses import dataclass

import numpy as np

from .tensor import left_singular_vectors, mode_product, unfold

DEFAULT_RANKS = (4, 8, 32, 32)


@dataclass(frozen=True)
class TuckerFactorization:
    """Core tensor of shape ``ranks`` plus one orthonormal factor per mode."""

    core: np.ndarray
    factors: tuple

    @property
    def ranks(self):
        return self.core.shape

    @property
    def dims(self):
        return tuple(u.shape[0] for u in self.factors)


def check_ranks(dims, ranks):
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != 4 or len(dims) != 4:
        raise ValueError(f"need 4 ranks for 4 dims, got {ranks} for {dims}")
    for r, d, name in zip(ranks, dims, "cthw"):
        if not 1 <= r <= d:
            raise ValueError(f"rank R_{name}={r} must lie in [1, {d}]")
    return ranks


def hosvd(x, ranks=DEFAULT_RANKS):
    """Truncated higher-order SVD of a rank-4 tensor.

    Factor ``i`` holds the leading ``ranks[i]`` left singular vectors of the
    mode-``i`` unfolding; the core is ``x`` projected onto all four bases.
    An all-zero input gets canonical basis vectors and a zero core.
    """
    ranks = check_ranks(x.shape, ranks)
    factors = []
    for mode, r in enumerate(ranks, start=1):
        mat = unfold(x, mode)
        if not np.any(mat):
            factors.append(np.eye(mat.shape[0], r, dtype=x.dtype))
            continue
        factors.append(left_singular_vectors(mat)[:, :r])
    core = x
    for mode, u in enumerate(factors, start=1):
        core = mode_product(core, u.T, mode)
    return TuckerFactorization(core, tuple(factors))


def reconstruct(f):
    """Multiply the core out along all four modes."""
    if len(f.factors) != 4 or f.core.ndim != 4:
        raise ValueError("a Tucker factorization needs a rank-4 core and 4 factors")
    out = f.core
    for mode, u in enumerate(f.factors, start=1):
        if u.shape[1] != out.shape[mode - 1]:
            raise ValueError(
                f"factor {mode} has {u.shape[1]} columns, core mode has "
                f"{out.shape[mode - 1]}"
            )
        out = mode_product(out, u, mode)
    return out


def relative_error(x, y):
    """``||x - y||_F / ||x||_F``."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    ref = np.linalg.norm(x)
    if ref == 0:
        raise ValueError("reference tensor has zero norm")
    return float(np.linalg.norm(x - y) / ref)


def compression_ratio(dims, ranks):
    """Latent size over Tucker storage, counting both the core and the factors."""
    ranks = check_ranks(dims, ranks)
    stored = int(np.prod(ranks)) + sum(d * r for d, r in zip(dims, ranks))
    return int(np.prod(dims)) / stored
