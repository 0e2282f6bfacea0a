"""Video noise prediction network.

The output is a structured filter of the input noise plus a scaled residual
from a token network that also sees the prompt::

    refined = filter(z) + beta * residual(z + text_embed(p))

The filter is one of three interchangeable variants: a gated Tucker filter
(the main model), a gated SVD of the time unfolding, or a per-frame MLP.
All forward passes are written against :mod:`noiseinit.autodiff` so the same
code serves inference and training.
"""
import enum
import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .tensor import svd, unfold
from .tucker import TuckerFactorization, check_ranks, hosvd


class FilterVariant(str, enum.Enum):
    TUCKER = "tucker"
    SVD = "svd"
    MLP = "mlp"


@dataclass(frozen=True)
class GcrmConfig:
    """Token network layout.

    ``windows[s]`` is the attention window (t, h, w) in tokens for stage
    ``s``, or ``None`` for global attention over the stage's tokens. Windows
    larger than the token grid are clipped to it; windows that do not tile
    the grid leave smaller windows at the far edge.
    """

    patch: int = 4
    depths: tuple = (2,)
    dims: tuple = (32,)
    head_dim: int = 16
    windows: tuple = ((2, 2, 2),)
    drop_path: float = 0.0
    mlp_ratio: int = 4

    def __post_init__(self):
        if not len(self.depths) == len(self.dims) == len(self.windows):
            raise ValueError("depths, dims and windows need one entry per stage")
        for d in self.dims:
            if d % self.head_dim:
                raise ValueError(f"stage dim {d} is not a multiple of head dim {self.head_dim}")

    @classmethod
    def preset(cls, name):
        if name == "tiny":
            return cls()
        if name == "paper":
            return cls(
                patch=4,
                depths=(5, 8, 20, 7),
                dims=(64, 128, 320, 512),
                head_dim=64,
                windows=((5, 5, 5), (5, 5, 5), None, None),
                drop_path=0.3,
            )
        if name == "paper-windowed":
            return cls.preset("paper").with_windows(((5, 5, 5), (5, 5, 5), (8, 8, 4), (8, 8, 4)))
        raise ValueError(f"unknown GCRM preset {name!r}")

    def with_windows(self, windows):
        return GcrmConfig(self.patch, self.depths, self.dims, self.head_dim, tuple(windows),
                          self.drop_path, self.mlp_ratio)

    def describe(self):
        return (f"patch={self.patch} depths={list(self.depths)} dims={list(self.dims)} "
                f"head_dim={self.head_dim} windows={list(self.windows)} "
                f"drop_path={self.drop_path:.2f}")


@dataclass(frozen=True)
class VnpnetConfig:
    dims: tuple = (4, 8, 16, 16)
    ranks: tuple = (4, 4, 8, 8)
    embed_dim: int = 64
    variant: FilterVariant = FilterVariant.TUCKER
    gcrm: GcrmConfig = field(default_factory=GcrmConfig)
    gate_hidden: int = 16
    feature_dim: int = 16
    mask_hidden: int = 128
    mlp_hidden: int = 64
    dropout: float = 0.1
    rescale_gates: bool = False
    beta_init: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "variant", FilterVariant(self.variant))
        check_ranks(self.dims, self.ranks)
        p = self.gcrm.patch
        for axis, n in zip("THW", self.dims[1:]):
            if n % p:
                raise ValueError(f"axis {axis} of size {n} is not divisible by patch size {p}")

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        g = dict(d.pop("gcrm"))
        g["windows"] = tuple(tuple(w) if w is not None else None for w in g["windows"])
        for key in ("depths", "dims"):
            g[key] = tuple(g[key])
        return cls(gcrm=GcrmConfig(**g), **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# ---------------------------------------------------------------------------
# token grid bookkeeping


def stage_grids(cfg):
    """Token grid (t, h, w) for each GCRM stage."""
    grid = tuple(n // cfg.gcrm.patch for n in cfg.dims[1:])
    grids = [grid]
    for _ in cfg.gcrm.depths[1:]:
        grid = tuple(n // 2 if n % 2 == 0 else n for n in grid)
        grids.append(grid)
    return grids


def _flat(grid, t, h, w):
    return (t * grid[1] + h) * grid[2] + w


def window_groups(grid, window):
    """Partition token indices into attention windows, grouped by window size.

    Returns ``(groups, inverse)``: each group is an int array of shape
    ``(n_windows, window_len)``, and ``inverse`` maps the concatenation of all
    groups back to token order.
    """
    if window is None:
        window = grid
    window = tuple(min(w, g) for w, g in zip(window, grid))
    by_len = {}
    starts = [range(0, g, w) for g, w in zip(grid, window)]
    for t0, h0, w0 in itertools.product(*starts):
        idx = [
            _flat(grid, t, h, w)
            for t in range(t0, min(t0 + window[0], grid[0]))
            for h in range(h0, min(h0 + window[1], grid[1]))
            for w in range(w0, min(w0 + window[2], grid[2]))
        ]
        by_len.setdefault(len(idx), []).append(idx)
    groups = [np.array(v) for _, v in sorted(by_len.items(), reverse=True)]
    order = np.concatenate([g.ravel() for g in groups])
    return groups, np.argsort(order)


def merge_index(grid):
    """For 2x downsampling: children of each coarse token, shape (N', k)."""
    factors = tuple(2 if n % 2 == 0 else 1 for n in grid)
    coarse = tuple(n // f for n, f in zip(grid, factors))
    rows = []
    for t, h, w in itertools.product(*(range(n) for n in coarse)):
        rows.append([
            _flat(grid, t * factors[0] + a, h * factors[1] + b, w * factors[2] + c)
            for a, b, c in itertools.product(*(range(f) for f in factors))
        ])
    return np.array(rows), int(np.prod(factors))


def upsample_index(fine, coarse):
    """Nearest-neighbour parent in ``coarse`` of every token in ``fine``."""
    scale = [f // c for f, c in zip(fine, coarse)]
    return np.array([
        _flat(coarse, t // scale[0], h // scale[1], w // scale[2])
        for t, h, w in itertools.product(*(range(n) for n in fine))
    ])


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg, seed=0):
    """Fresh parameters as an ordered ``name -> float64 array`` dict."""
    rng = np.random.default_rng(seed)
    params = {}

    def dense(name, fan_in, fan_out, scale=1.0):
        params[name + ".w"] = rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out))
        params[name + ".b"] = np.zeros(fan_out)

    C, T, H, W = cfg.dims
    if cfg.variant is FilterVariant.TUCKER:
        for mode, r in zip("cthw", cfg.ranks):
            dense(f"tbnf.gate.{mode}.l1", r, cfg.gate_hidden)
            dense(f"tbnf.gate.{mode}.l2", cfg.gate_hidden, r)
            dense(f"tbnf.mask.phi.{mode}", r, cfg.feature_dim)
        dense("tbnf.mask.l1", 4 * cfg.feature_dim + cfg.embed_dim, cfg.mask_hidden)
        dense("tbnf.mask.l2", cfg.mask_hidden, int(np.prod(cfg.ranks)))
    elif cfg.variant is FilterVariant.SVD:
        r = cfg.ranks[1]
        dense("svd.gate.l1", r, cfg.gate_hidden)
        dense("svd.gate.l2", cfg.gate_hidden, r)
    else:
        frame = C * H * W
        dense("mlp.l1", frame, cfg.mlp_hidden)
        dense("mlp.l2", cfg.mlp_hidden, frame)

    params["text.w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.embed_dim), (cfg.embed_dim, C))

    g = cfg.gcrm
    grids = stage_grids(cfg)
    patch_len = C * g.patch**3
    dense("gcrm.patch", patch_len, g.dims[0])
    params["gcrm.pos"] = rng.normal(0.0, 0.02, (int(np.prod(grids[0])), g.dims[0]))
    for s, (depth, dim) in enumerate(zip(g.depths, g.dims)):
        if s > 0:
            _, k = merge_index(grids[s - 1])
            dense(f"gcrm.s{s}.merge", k * g.dims[s - 1], dim)
        for b in range(depth):
            pre = f"gcrm.s{s}.b{b}"
            params[pre + ".dpe.w"] = rng.normal(0.0, 1.0 / np.sqrt(27), (dim, 3, 3, 3))
            params[pre + ".dpe.b"] = np.zeros(dim)
            for norm in ("norm1", "norm2"):
                params[f"{pre}.{norm}.g"] = np.ones(dim)
                params[f"{pre}.{norm}.b"] = np.zeros(dim)
            dense(pre + ".qkv", dim, 3 * dim)
            dense(pre + ".proj", dim, dim)
            dense(pre + ".fc1", dim, g.mlp_ratio * dim)
            dense(pre + ".fc2", g.mlp_ratio * dim, dim)
    if len(g.dims) > 1:
        dense("gcrm.up", g.dims[-1], g.dims[0])
    params["gcrm.norm.g"] = np.ones(g.dims[0])
    params["gcrm.norm.b"] = np.zeros(g.dims[0])
    dense("gcrm.head", g.dims[0], patch_len)
    params["beta"] = np.array(cfg.beta_init)
    return params


def param_group(name):
    """Coarse group of a parameter name, e.g. ``tbnf.gate`` or ``gcrm``."""
    head = name.split(".")
    if head[0] == "tbnf":
        return "tbnf." + head[1]
    return head[0]


def count_params(params):
    return int(sum(np.size(v) for v in params.values()))


# ---------------------------------------------------------------------------
# forward pieces


class _Ctx:
    """Per-call state: tape, parameter leaves and the dropout stream."""

    def __init__(self, tape, params, cfg, train_mode, seed):
        self.tape = tape
        self.params = params
        self.cfg = cfg
        self.train = train_mode
        self.rng = np.random.default_rng(seed) if train_mode else None

    def p(self, name):
        return self.tape.param(name, self.params[name])

    def dense(self, x, name):
        return ad.linear(x, self.p(name + ".w"), self.p(name + ".b"))

    def dropout(self, x, rate):
        if not self.train or rate <= 0:
            return x
        keep = (self.rng.random(x.shape) >= rate) / (1.0 - rate)
        return ad.mul(x, keep)

    def drop_path(self, branch, rate):
        if not self.train or rate <= 0:
            return branch
        keep = float(self.rng.random() >= rate) / (1.0 - rate)
        return ad.mul(branch, keep)


def factor_features(f):
    """Energy of each Tucker component, per mode.

    Feature ``j`` of mode ``i`` is the L2 norm of column ``j`` of
    ``U_i`` scaled by the matching core slice norm, over the core norm. HOSVD
    factors have unit columns, so the unscaled column norms would all be 1.
    """
    total = np.linalg.norm(f.core)
    feats = []
    for mode, u in enumerate(f.factors):
        core_axes = tuple(a for a in range(4) if a != mode)
        slice_norm = np.sqrt(np.sum(f.core**2, axis=core_axes))
        scaled = u * slice_norm
        col = np.linalg.norm(scaled, axis=0)
        feats.append(col / total if total > 0 else col)
    return feats


def _gate(ctx, feature, prefix):
    h = ad.gelu(ctx.dense(ctx.tape.const(feature[None, :]), prefix + ".l1"))
    h = ctx.dropout(h, ctx.cfg.dropout)
    w = ad.softmax(ctx.dense(h, prefix + ".l2"), axis=-1)
    if ctx.cfg.rescale_gates:
        w = ad.mul(w, float(feature.shape[0]))
    return w


def factor_gates(ctx, f):
    """One softmax gate row vector (1, R_i) per mode."""
    feats = factor_features(f)
    return [_gate(ctx, feat, f"tbnf.gate.{m}") for feat, m in zip(feats, "cthw")]


def apply_factor_scaling(factors, gates):
    """Scale column ``j`` of every factor by its gate weight."""
    out = []
    for u, w in zip(factors, gates):
        if w.shape[-1] != u.shape[-1]:
            raise ValueError(f"gate of length {w.shape[-1]} for factor with {u.shape[-1]} columns")
        out.append(ad.mul(u, w))
    return out


def core_mask(ctx, f, prompt_vec):
    """Sigmoid mask over the core, shaped like the core."""
    if prompt_vec.shape != (ctx.cfg.embed_dim,):
        raise ValueError(f"prompt embedding of shape {prompt_vec.shape}, expected ({ctx.cfg.embed_dim},)")
    feats = factor_features(f)
    parts = [ctx.dense(ctx.tape.const(feat[None, :]), f"tbnf.mask.phi.{m}")
             for feat, m in zip(feats, "cthw")]
    parts.append(ctx.tape.const(prompt_vec[None, :]))
    h = ad.gelu(ctx.dense(ad.concat(parts, axis=-1), "tbnf.mask.l1"))
    h = ctx.dropout(h, ctx.cfg.dropout)
    logits = ctx.dense(h, "tbnf.mask.l2")
    return ad.reshape(ad.sigmoid(logits), f.core.shape)


def reconstruct_var(core, factors):
    out = core
    for mode, u in enumerate(factors, start=1):
        out = ad.mode_product(out, u, mode)
    return out


def _tucker_filter(ctx, z, prompt_vec, f=None):
    if f is None:
        f = hosvd(z, ctx.cfg.ranks)
    tape = ctx.tape
    gates = factor_gates(ctx, f)
    scaled = apply_factor_scaling([tape.const(u) for u in f.factors], gates)
    gamma = core_mask(ctx, f, prompt_vec)
    return reconstruct_var(ad.mul(gamma, tape.const(f.core)), scaled)


def _svd_filter(ctx, z, prompt_vec, f=None):
    r = ctx.cfg.ranks[1]
    u, s, v = svd(unfold(z, 2))
    u, s, v = u[:, :r], s[:r], v[:, :r]
    norm = np.linalg.norm(s)
    w = _gate(ctx, s / norm if norm > 0 else s, "svd.gate")
    tape = ctx.tape
    weighted = ad.mul(tape.const(u * s), w)
    mat = ad.matmul(weighted, tape.const(v.T))
    dims = z.shape
    # fold along mode 2: (T, C*H*W) -> (C, T, H, W)
    return ad.transpose(ad.reshape(mat, (dims[1], dims[0], dims[2], dims[3])), (1, 0, 2, 3))


def _mlp_filter(ctx, z, prompt_vec, f=None):
    C, T, H, W = z.shape
    frames = ctx.tape.const(np.transpose(z, (1, 0, 2, 3)).reshape(T, C * H * W))
    h = ctx.dropout(ad.gelu(ctx.dense(frames, "mlp.l1")), ctx.cfg.dropout)
    out = ctx.dense(h, "mlp.l2")
    return ad.transpose(ad.reshape(out, (T, C, H, W)), (1, 0, 2, 3))


_FILTERS = {
    FilterVariant.TUCKER: _tucker_filter,
    FilterVariant.SVD: _svd_filter,
    FilterVariant.MLP: _mlp_filter,
}


def text_embed_var(ctx, prompt_vec):
    """Project the prompt to one value per channel and broadcast over (T, H, W)."""
    if prompt_vec.shape != (ctx.cfg.embed_dim,):
        raise ValueError(f"prompt embedding of shape {prompt_vec.shape}, expected ({ctx.cfg.embed_dim},)")
    per_channel = ad.matmul(ctx.tape.const(prompt_vec[None, :]), ctx.p("text.w"))
    return ad.reshape(per_channel, (ctx.cfg.dims[0], 1, 1, 1))


def _affine_norm(ctx, x, name):
    return ad.add(ad.mul(ad.layer_norm(x), ctx.p(name + ".g")), ctx.p(name + ".b"))


def _attention(ctx, x, dim, grid, window, name):
    heads = dim // ctx.cfg.gcrm.head_dim
    hd = ctx.cfg.gcrm.head_dim
    qkv = ctx.dense(x, name + ".qkv")
    groups, inverse = window_groups(grid, window)
    outs = []
    for idx in groups:
        nw, L = idx.shape
        tokens = ad.gather(qkv, idx)  # (nw, L, 3*dim)
        tokens = ad.transpose(ad.reshape(tokens, (nw, L, 3, heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = (ad.gather(tokens, i) for i in range(3))  # (nw, heads, L, hd)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        att = ad.matmul(ad.softmax(scores, axis=-1), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (nw * L, dim))
        outs.append(att)
    merged = outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
    merged = ad.gather(merged, inverse)
    return ctx.dense(merged, name + ".proj")


def _dpe(ctx, x, dim, grid, name):
    vol = ad.transpose(ad.reshape(x, grid + (dim,)), (3, 0, 1, 2))
    conv = ad.dwconv3d(vol, ctx.p(name + ".w"))
    tokens = ad.reshape(ad.transpose(conv, (1, 2, 3, 0)), (-1, dim))
    return ad.add(tokens, ctx.p(name + ".b"))


def _block(ctx, x, dim, grid, window, name, dp):
    x = ad.add(x, ctx.drop_path(_dpe(ctx, x, dim, grid, name + ".dpe"), dp))
    h = _attention(ctx, _affine_norm(ctx, x, name + ".norm1"), dim, grid, window, name)
    x = ad.add(x, ctx.drop_path(h, dp))
    h = ad.gelu(ctx.dense(_affine_norm(ctx, x, name + ".norm2"), name + ".fc1"))
    x = ad.add(x, ctx.drop_path(ctx.dense(h, name + ".fc2"), dp))
    return x


def patchify(x, p):
    C, T, H, W = x.shape
    v = ad.reshape(x, (C, T // p, p, H // p, p, W // p, p))
    v = ad.transpose(v, (1, 3, 5, 0, 2, 4, 6))
    return ad.reshape(v, ((T // p) * (H // p) * (W // p), C * p**3))


def unpatchify(tokens, dims, p):
    C, T, H, W = dims
    v = ad.reshape(tokens, (T // p, H // p, W // p, C, p, p, p))
    v = ad.transpose(v, (3, 0, 4, 1, 5, 2, 6))
    return ad.reshape(v, dims)


def token_count(cfg):
    return int(np.prod(stage_grids(cfg)[0]))


def _gcrm(ctx, x):
    g = ctx.cfg.gcrm
    grids = stage_grids(ctx.cfg)
    h = ad.add(ctx.dense(patchify(x, g.patch), "gcrm.patch"), ctx.p("gcrm.pos"))
    total = sum(g.depths)
    rates = np.linspace(0.0, g.drop_path, total) if total > 1 else np.array([g.drop_path])
    block = 0
    for s, (depth, dim) in enumerate(zip(g.depths, g.dims)):
        if s > 0:
            idx, k = merge_index(grids[s - 1])
            merged = ad.reshape(ad.gather(h, idx), (idx.shape[0], k * g.dims[s - 1]))
            h = ctx.dense(merged, f"gcrm.s{s}.merge")
        for b in range(depth):
            h = _block(ctx, h, dim, grids[s], g.windows[s], f"gcrm.s{s}.b{b}", rates[block])
            block += 1
    if len(g.dims) > 1:
        h = ctx.dense(ad.gather(h, upsample_index(grids[0], grids[-1])), "gcrm.up")
    h = _affine_norm(ctx, h, "gcrm.norm")
    return unpatchify(ctx.dense(h, "gcrm.head"), ctx.cfg.dims, g.patch)


def build_forward(tape, params, cfg, z, prompt_vec, train_mode=False, seed=0, factorization=None):
    """Record the full forward pass on ``tape`` and return the output node."""
    if z.shape != cfg.dims:
        raise ValueError(f"latent of shape {z.shape}, model expects {cfg.dims}")
    ctx = _Ctx(tape, params, cfg, train_mode, seed)
    filtered = _FILTERS[cfg.variant](ctx, z, prompt_vec, factorization)
    residual = _gcrm(ctx, ad.add(tape.const(z), text_embed_var(ctx, prompt_vec)))
    return ad.add(filtered, ad.mul(ctx.p("beta"), residual))


# ---------------------------------------------------------------------------
# array-level entry points


def _run(fn, params, cfg, *args, train_mode=False, seed=0):
    tape = ad.Tape()
    ctx = _Ctx(tape, params, cfg, train_mode, seed)
    return fn(ctx, *args).value


def tbnf_forward(z, prompt_vec, params, cfg, train_mode=False, seed=0, factorization=None):
    """Structured-filter branch alone, for the configured variant."""
    if z.shape != cfg.dims:
        raise ValueError(f"latent of shape {z.shape}, model expects {cfg.dims}")
    return _run(_FILTERS[cfg.variant], params, cfg, z, prompt_vec, factorization,
                train_mode=train_mode, seed=seed)


def gcrm_forward(x, params, cfg, train_mode=False, seed=0):
    """Residual token network on a latent-shaped input."""
    if x.shape != cfg.dims:
        raise ValueError(f"latent of shape {x.shape}, model expects {cfg.dims}")
    return _run(lambda ctx, v: _gcrm(ctx, ctx.tape.const(v)), params, cfg, x,
                train_mode=train_mode, seed=seed)


def text_embed(prompt_vec, params, cfg):
    e = _run(text_embed_var, params, cfg, prompt_vec)
    return np.broadcast_to(e, cfg.dims).copy()


def factor_gates_array(f, params, cfg, train_mode=False, seed=0):
    return [w.ravel() for w in _run_list(factor_gates, params, cfg, f, train_mode, seed)]


def core_mask_array(f, prompt_vec, params, cfg, train_mode=False, seed=0):
    return _run(core_mask, params, cfg, f, prompt_vec, train_mode=train_mode, seed=seed)


def _run_list(fn, params, cfg, f, train_mode, seed):
    tape = ad.Tape()
    ctx = _Ctx(tape, params, cfg, train_mode, seed)
    return [v.value for v in fn(ctx, f)]


def scale_factorization(f, gates):
    """Array version of :func:`apply_factor_scaling`; core unchanged."""
    factors = []
    for u, w in zip(f.factors, gates):
        w = np.asarray(w).ravel()
        if w.shape[0] != u.shape[1]:
            raise ValueError(f"gate of length {w.shape[0]} for factor with {u.shape[1]} columns")
        factors.append(u * w)
    return TuckerFactorization(f.core, tuple(factors))


def vnpnet_forward(z, prompt_vec, params, cfg, train_mode=False, seed=0, factorization=None):
    """Refined noise for latent ``z`` and prompt embedding vector ``prompt_vec``."""
    tape = ad.Tape()
    return build_forward(tape, params, cfg, z, prompt_vec, train_mode, seed, factorization).value
