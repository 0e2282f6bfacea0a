"""Training: loss, AdamW, cosine schedule, gradient checking and the loop."""
import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .pndata import atomic_write, read_dataset
from .refine import derive_seed
from .tucker import hosvd
from .vnpnet import FilterVariant, build_forward, init_params, param_group

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 2e-4
    lr1: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > self.lr1 > 0:
            raise ValueError(f"need lr0 > lr1 > 0, got {self.lr0}, {self.lr1}")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")


def mse_loss(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def cosine_lr(step, total_steps, lr0=2e-4, lr1=1e-6):
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params, grads, state, lr, cfg):
    """One AdamW update, returning new params and state.

    Weight decay is decoupled: ``p <- p * (1 - lr * wd)`` before the
    bias-corrected Adam step.
    """
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        decayed = p * (1.0 - lr * cfg.weight_decay)
        new_params[name] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


@dataclass
class Sample:
    z_rand: np.ndarray
    prompt: np.ndarray
    target: np.ndarray
    factorization: object = None


def load_samples(path, model_cfg):
    header, reader = read_dataset(path)
    if tuple(header.dims) != model_cfg.dims:
        raise ValueError(f"dataset dims {header.dims} do not match model dims {model_cfg.dims}")
    if header.embedding_dim != model_cfg.embed_dim:
        raise ValueError(f"dataset embedding dim {header.embedding_dim} != model {model_cfg.embed_dim}")
    samples = []
    for rec in reader:
        z = rec.z_rand.astype(np.float64)
        f = hosvd(z, model_cfg.ranks) if model_cfg.variant is FilterVariant.TUCKER else None
        samples.append(Sample(z, rec.embedding.astype(np.float64), rec.z_refined.astype(np.float64), f))
    return samples


def batch_loss(tape, params, model_cfg, batch, train_mode, seeds):
    """Mean of per-sample MSE over ``batch``, recorded on ``tape``."""
    losses = []
    for sample, seed in zip(batch, seeds):
        out = build_forward(tape, params, model_cfg, sample.z_rand, sample.prompt,
                            train_mode, seed, sample.factorization)
        losses.append(ad.mse(out, tape.const(sample.target)))
    total = losses[0]
    for loss in losses[1:]:
        total = ad.add(total, loss)
    return ad.mul(total, 1.0 / len(losses))


def loss_and_grads(params, model_cfg, batch, train_mode=False, seeds=None):
    seeds = seeds if seeds is not None else [0] * len(batch)
    tape = ad.Tape()
    loss = batch_loss(tape, params, model_cfg, batch, train_mode, seeds)
    return float(loss.value), tape.backward(loss)


def evaluate(params, model_cfg, samples):
    """Eval-mode MSE of the model and of the identity map over ``samples``."""
    model, identity = [], []
    for s in samples:
        tape = ad.Tape()
        out = build_forward(tape, params, model_cfg, s.z_rand, s.prompt, False, 0, s.factorization)
        model.append(mse_loss(out.value, s.target))
        identity.append(mse_loss(s.z_rand, s.target))
    return float(np.mean(model)), float(np.mean(identity))


@dataclass
class TrainResult:
    params: dict
    history: list
    initial_loss: float
    final_loss: float
    identity_loss: float


def train_samples(samples, cfg, model_cfg, params=None):
    """Mini-batch AdamW on in-memory samples.

    Batches are drawn by reshuffling the samples every epoch with ``cfg.seed``;
    dropout streams are derived from ``(seed, step, position in batch)``.
    """
    if not samples:
        raise ValueError("no training samples")
    params = dict(params) if params is not None else init_params(model_cfg, cfg.seed)
    state = AdamState.zeros_like(params)
    initial, identity = evaluate(params, model_cfg, samples)
    rng = np.random.default_rng(cfg.seed)
    order = np.array([], dtype=int)
    history = []
    for step in range(cfg.steps):
        if order.size < cfg.batch_size:
            order = np.concatenate([order, rng.permutation(len(samples))])
        take, order = order[:cfg.batch_size], order[cfg.batch_size:]
        batch = [samples[i] for i in take]
        seeds = [derive_seed(cfg.seed, step, j) for j in range(len(batch))]
        loss, grads = loss_and_grads(params, model_cfg, batch, True, seeds)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        lr = cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr1)
        params, state = adamw_step(params, grads, state, lr, cfg)
        history.append((step, lr, loss))
        if step % 50 == 0:
            log.info("step %d lr %.3g loss %.6f", step, lr, loss)
    final, _ = evaluate(params, model_cfg, samples)
    return TrainResult(params, history, initial, final, identity)


def train(dataset_path, cfg, model_cfg, params=None):
    """Train on a PND1 file; see :func:`train_samples`."""
    return train_samples(load_samples(dataset_path, model_cfg), cfg, model_cfg, params)


def write_history(path, history):
    """Loss log as CSV with columns ``step,lr,loss``, written atomically."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "lr", "loss"])
    for step, lr, loss in history:
        writer.writerow([step, repr(lr), repr(loss)])
    with atomic_write(path) as fh:
        fh.write(buf.getvalue().encode("utf-8"))


def grad_check(params, model_cfg, batch, eps=1e-5, coords=256, seed=0, floor=1e-6, backward=None):
    """Worst relative error between reverse-mode and central-difference gradients.

    ``coords`` coordinates are sampled, spread evenly over parameter groups
    (every group gets at least one). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. Runs in eval mode so the loss is
    deterministic. ``backward`` overrides the analytic gradient routine.
    """
    def loss_at(p):
        tape = ad.Tape()
        value = float(batch_loss(tape, p, model_cfg, batch, False, [0] * len(batch)).value)
        if not math.isfinite(value):
            raise FloatingPointError("non-finite loss during gradient check")
        return value

    backward = backward or (lambda p: loss_and_grads(p, model_cfg, batch)[1])
    grads = backward(params)
    rng = np.random.default_rng(seed)
    groups = {}
    for name in params:
        groups.setdefault(param_group(name), []).append(name)
    per_group = max(1, coords // len(groups))
    report = {}
    worst = 0.0
    work = {k: v.copy() for k, v in params.items()}
    for group, names in groups.items():
        sizes = np.array([params[n].size for n in names])
        picks = rng.choice(int(sizes.sum()), size=min(per_group, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        group_worst = 0.0
        for flat in picks:
            k = int(np.searchsorted(bounds, flat, side="right"))
            name = names[k]
            offset = int(flat - (bounds[k - 1] if k else 0))
            arr = work[name].reshape(-1)
            orig = arr[offset]
            arr[offset] = orig + eps
            plus = loss_at(work)
            arr[offset] = orig - eps
            minus = loss_at(work)
            arr[offset] = orig
            numeric = (plus - minus) / (2 * eps)
            analytic = float(np.asarray(grads[name]).reshape(-1)[offset])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            group_worst = max(group_worst, err)
        report[group] = group_worst
        worst = max(worst, group_worst)
    return worst, report
