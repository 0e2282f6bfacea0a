"""Command-line entry point: ``noiseinit <command> [flags]``.

Every command accepts ``--config FILE`` holding ``key=value`` lines (``#``
starts a comment). Keys are flag names with or without leading dashes;
explicit flags win over file values, which win over built-in defaults. The
effective configuration is echoed before a command runs.

Exit codes: 0 on success, 1 on a runtime failure, 2 on bad usage.
"""
import argparse
import logging
import os
import statistics
import struct
import sys
import time

import numpy as np

from . import checkpoint, kernels
from .pndata import atomic_write, dataset_stats, generate_pndata, read_dataset
from .prompts import DEFAULT_EMBED_DIM, embed_prompt
from .refine import DESK_ALPHA_BAR, RefineConfig, SyntheticDenoiser, refine_iterative
from .spectral import DEFAULT_CUTOFF, gaussian_lowpass_mask, low_freq_energy_ratio, temporal_correlation
from .tensor import sample_gaussian
from .train import TrainConfig, evaluate, load_samples, train_samples, write_history
from .vnpnet import FilterVariant, GcrmConfig, VnpnetConfig, init_params, vnpnet_forward

log = logging.getLogger("noiseinit")

LATENT_MAGIC = b"LAT1"
_LATENT_HEADER = struct.Struct("<4sIIII")


class UsageError(Exception):
    """Bad flags, config keys or input paths; maps to exit code 2."""


# ---------------------------------------------------------------------------
# LAT1 latent files


def write_latent(path, z):
    """Store a (C, T, H, W) latent as a 20-byte header plus f32 payload."""
    z = np.asarray(z)
    if z.ndim != 4:
        raise ValueError(f"latent must be 4-D, got shape {z.shape}")
    with atomic_write(path) as fh:
        fh.write(_LATENT_HEADER.pack(LATENT_MAGIC, *z.shape))
        fh.write(np.ascontiguousarray(z, dtype="<f4").tobytes())


def read_latent(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _LATENT_HEADER.size:
        raise ValueError(f"{path}: too short for a latent header")
    magic, *dims = _LATENT_HEADER.unpack_from(raw)
    if magic != LATENT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {LATENT_MAGIC!r}")
    n = int(np.prod(dims))
    if len(raw) != _LATENT_HEADER.size + 4 * n:
        raise ValueError(f"{path}: payload of {len(raw) - _LATENT_HEADER.size} bytes, expected {4 * n}")
    return np.frombuffer(raw, dtype="<f4", offset=_LATENT_HEADER.size).reshape(dims).astype(np.float64)


# ---------------------------------------------------------------------------
# option handling


def parse_dims(text):
    try:
        dims = tuple(int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxTxHxW, got {text!r}") from None
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected four positive sizes CxTxHxW, got {text!r}")
    return dims


def parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _choice(*names):
    def convert(text):
        if text not in names:
            raise argparse.ArgumentTypeError(f"expected one of {', '.join(names)}, got {text!r}")
        return text
    return convert


# (flag, converter, default, help); a default of None means optional/unset.
_OPTIONS = {
    "gen-data": [
        ("prompts", str, None, "UTF-8 text file, one prompt per line"),
        ("out", str, None, "output PND1 dataset"),
        ("dims", parse_dims, (4, 8, 16, 16), "latent size CxTxHxW"),
        ("iters", int, 5, "refinement rounds"),
        ("seed", int, 0, "base seed; record i uses seed + i"),
        ("d0", float, DEFAULT_CUTOFF, "low-pass cutoff"),
        ("alpha-bar", float, DESK_ALPHA_BAR, "terminal cumulative alpha for re-noising"),
        ("temporal-blend", float, 0.8, "denoiser temporal EMA weight"),
        ("spatial-sigma", float, 1.0, "denoiser spatial blur width"),
        ("embed-dim", int, DEFAULT_EMBED_DIM, "prompt embedding size"),
    ],
    "train": [
        ("data", str, None, "training PND1 dataset"),
        ("out", str, None, "output VNP1 checkpoint"),
        ("log", str, None, "loss CSV (default: OUT.csv)"),
        ("holdout", str, None, "optional held-out PND1 dataset"),
        ("preset", _choice("tiny", "paper", "paper-windowed"), "tiny", "GCRM layout"),
        ("variant", _choice(*(v.value for v in FilterVariant)), "tucker", "structured filter"),
        ("ranks", parse_dims, (4, 4, 8, 8), "Tucker ranks, clipped to the data dims"),
        ("steps", int, 500, "optimizer steps"),
        ("batch-size", int, 8, "records per step"),
        ("lr0", float, 2e-4, "initial learning rate"),
        ("lr1", float, 1e-6, "final learning rate"),
        ("weight-decay", float, 0.01, "decoupled weight decay"),
        ("dropout", float, 0.1, "dropout on filter hidden features"),
        ("beta-init", float, 0.1, "initial residual scale"),
        ("seed", int, 0, "initialization and batching seed"),
        ("dry-run", parse_bool, False, "print the configuration and stop"),
    ],
    "refine": [
        ("checkpoint", str, None, "VNP1 checkpoint"),
        ("out", str, None, "output LAT1 latent"),
        ("prompt", str, None, "text prompt"),
        ("input", str, None, "LAT1 latent to refine (default: sample with --seed)"),
        ("seed", int, 0, "noise seed"),
        ("d0", float, DEFAULT_CUTOFF, "cutoff for the reported low-frequency ratio"),
    ],
    "bench": [
        ("checkpoint", str, None, "VNP1 checkpoint (default: fresh tiny network)"),
        ("dims", parse_dims, (4, 16, 64, 64), "latent size when no checkpoint is given"),
        ("ranks", parse_dims, (4, 8, 32, 32), "Tucker ranks when no checkpoint is given"),
        ("iters", int, 5, "refinement rounds for the iterative path"),
        ("trials", int, 5, "repetitions; medians are reported"),
        ("seed", int, 0, "noise and parameter seed"),
        ("prompt", str, "a timelapse of clouds over mountains", "text prompt"),
    ],
    "eval": [
        ("data", str, None, "PND1 dataset to describe and score on"),
        ("checkpoint", str, None, "comma-separated VNP1 checkpoints"),
        ("d0", float, DEFAULT_CUTOFF, "low-pass cutoff for statistics"),
    ],
}
_REQUIRED = {
    "gen-data": ("prompts", "out"),
    "train": ("data", "out"),
    "refine": ("checkpoint", "out", "prompt"),
    "bench": (),
    "eval": ("data",),
}


def _dest(flag):
    return flag.replace("-", "_")


def read_config_file(path, command):
    """Parse a ``key=value`` file against the options of ``command``."""
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    known = {_dest(flag): conv for flag, conv, _, _ in _OPTIONS[command]}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            dest = _dest(key.lstrip("-"))
            if dest not in known:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r} for {command}")
            try:
                values[dest] = known[dest](value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def resolve_config(command, args):
    """Merge defaults, config file values and explicit flags."""
    cfg = {_dest(flag): default for flag, _, default, _ in _OPTIONS[command]}
    if args.config:
        cfg.update(read_config_file(args.config, command))
    for dest in cfg:
        value = getattr(args, dest)
        if value is not None:
            cfg[dest] = value
    missing = [k for k in _REQUIRED[command] if cfg[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _format_value(value):
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    return str(value)


def echo_config(command, cfg, out):
    print(f"# noiseinit {command} effective config", file=out)
    for key in sorted(cfg):
        if cfg[key] is not None:
            print(f"{key.replace('_', '-')}={_format_value(cfg[key])}", file=out)


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _peak_rss_bytes():
    try:
        import resource
    except ImportError:
        return None
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return peak if sys.platform == "darwin" else peak * 1024


# ---------------------------------------------------------------------------
# commands


def read_prompts(path):
    _require_file(path, "prompts file")
    with open(path, encoding="utf-8") as fh:
        prompts = [line.strip() for line in fh if line.strip()]
    if not prompts:
        raise UsageError(f"prompts file has no prompts: {path}")
    return prompts


def cmd_gen_data(cfg, out):
    prompts = read_prompts(cfg["prompts"])
    refine_cfg = RefineConfig(cfg["iters"], cfg["d0"], cfg["alpha_bar"], cfg["seed"])
    denoiser = SyntheticDenoiser(cfg["temporal_blend"], cfg["spatial_sigma"])
    report = generate_pndata(prompts, cfg["dims"], refine_cfg, denoiser, cfg["out"], cfg["embed_dim"])
    print(report.summary(), file=out)
    return 0


def _model_config(cfg, dims, embed_dim):
    ranks = tuple(min(r, d) for r, d in zip(cfg["ranks"], dims))
    return VnpnetConfig(
        dims=dims, ranks=ranks, embed_dim=embed_dim, variant=cfg["variant"],
        gcrm=GcrmConfig.preset(cfg["preset"]), dropout=cfg["dropout"], beta_init=cfg["beta_init"],
    )


def cmd_train(cfg, out):
    _require_file(cfg["data"], "dataset")
    header, _ = read_dataset(cfg["data"])
    model_cfg = _model_config(cfg, tuple(header.dims), header.embedding_dim)
    train_cfg = TrainConfig(lr0=cfg["lr0"], lr1=cfg["lr1"], weight_decay=cfg["weight_decay"],
                            batch_size=cfg["batch_size"], steps=cfg["steps"], seed=cfg["seed"])
    print(f"model: variant={model_cfg.variant.value} dims={list(model_cfg.dims)} "
          f"ranks={list(model_cfg.ranks)}", file=out)
    print(f"gcrm ({cfg['preset']}): {model_cfg.gcrm.describe()}", file=out)
    if cfg["dry_run"]:
        return 0
    samples = load_samples(cfg["data"], model_cfg)
    result = train_samples(samples, train_cfg, model_cfg)
    checkpoint.save(cfg["out"], result.params, model_cfg)
    write_history(cfg["log"] or cfg["out"] + ".csv", result.history)
    print(f"initial_loss={result.initial_loss:.6f} final_loss={result.final_loss:.6f} "
          f"identity_mse={result.identity_loss:.6f}", file=out)
    if cfg["holdout"]:
        _require_file(cfg["holdout"], "held-out dataset")
        model_mse, identity_mse = evaluate(result.params, model_cfg, load_samples(cfg["holdout"], model_cfg))
        print(f"holdout_mse={model_mse:.6f} holdout_identity_mse={identity_mse:.6f} "
              f"ratio={model_mse / identity_mse:.4f}", file=out)
    return 0


def latent_metrics(z, mask):
    return temporal_correlation(z), low_freq_energy_ratio(z, mask)


def cmd_refine(cfg, out):
    _require_file(cfg["checkpoint"], "checkpoint")
    params, model_cfg = checkpoint.load(cfg["checkpoint"])
    prompt = embed_prompt(cfg["prompt"], model_cfg.embed_dim)
    if cfg["input"]:
        _require_file(cfg["input"], "input latent")
        z = read_latent(cfg["input"])
    else:
        z = sample_gaussian(model_cfg.dims, cfg["seed"], dtype=np.float32).astype(np.float64)
    if z.shape != model_cfg.dims:
        raise ValueError(f"latent of shape {z.shape}, checkpoint expects {model_cfg.dims}")
    refined = vnpnet_forward(z, prompt.vector, params, model_cfg)
    write_latent(cfg["out"], refined)
    mask = gaussian_lowpass_mask(z.shape[1:], cfg["d0"])
    tc0, lfr0 = latent_metrics(z, mask)
    tc1, lfr1 = latent_metrics(refined, mask)
    print(f"temporal_correlation before={tc0:.6f} after={tc1:.6f}", file=out)
    print(f"low_freq_ratio before={lfr0:.6f} after={lfr1:.6f}", file=out)
    return 0


def _time(fn, trials):
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return times


def cmd_bench(cfg, out):
    if cfg["trials"] < 1 or cfg["iters"] < 1:
        raise UsageError("--trials and --iters must be >= 1")
    if cfg["checkpoint"]:
        _require_file(cfg["checkpoint"], "checkpoint")
        params, model_cfg = checkpoint.load(cfg["checkpoint"])
    else:
        model_cfg = VnpnetConfig(dims=cfg["dims"], ranks=cfg["ranks"])
        params = init_params(model_cfg, cfg["seed"])
    prompt = embed_prompt(cfg["prompt"], model_cfg.embed_dim)
    z = sample_gaussian(model_cfg.dims, cfg["seed"])
    refine_cfg = RefineConfig(iterations=cfg["iters"], seed=cfg["seed"])
    denoiser = SyntheticDenoiser()
    # warm-up so both paths start with loaded code and allocated caches
    vnpnet_forward(z, prompt.vector, params, model_cfg)
    refine_iterative(z, prompt, RefineConfig(iterations=1, seed=cfg["seed"]), denoiser)
    net = _time(lambda: vnpnet_forward(z, prompt.vector, params, model_cfg), cfg["trials"])
    oracle = _time(lambda: refine_iterative(z, prompt, refine_cfg, denoiser), cfg["trials"])
    net_med, oracle_med = statistics.median(net), statistics.median(oracle)
    print(f"kernel_backend={kernels.BACKEND} dims={list(model_cfg.dims)} trials={cfg['trials']}", file=out)
    print(f"vnpnet_forward median_s={net_med:.6f}", file=out)
    print(f"refine_iterative(K={cfg['iters']}) median_s={oracle_med:.6f}", file=out)
    print(f"ratio={oracle_med / net_med:.3f}", file=out)
    peak = _peak_rss_bytes()
    print("peak_rss_mb=" + (f"{peak / 2**20:.1f}" if peak else "n/a"), file=out)
    if cfg["trials"] < 5:
        print("unstable: fewer than 5 trials, medians are not reliable", file=out)
    return 0


def variant_scores(params, model_cfg, data_path, d0):
    """Held-out MSE, identity MSE and mean metric shifts of one checkpoint."""
    samples = load_samples(data_path, model_cfg)
    model_mse, identity_mse = evaluate(params, model_cfg, samples)
    mask = gaussian_lowpass_mask(model_cfg.dims[1:], d0)
    d_tc, d_lfr = [], []
    for s in samples:
        pred = vnpnet_forward(s.z_rand, s.prompt, params, model_cfg, factorization=s.factorization)
        tc0, lfr0 = latent_metrics(s.z_rand, mask)
        tc1, lfr1 = latent_metrics(pred, mask)
        d_tc.append(tc1 - tc0)
        d_lfr.append(lfr1 - lfr0)
    return {
        "mse": model_mse,
        "identity_mse": identity_mse,
        "delta_tc": float(np.mean(d_tc)),
        "delta_lfr": float(np.mean(d_lfr)),
    }


def cmd_eval(cfg, out):
    _require_file(cfg["data"], "dataset")
    stats = dataset_stats(cfg["data"], cfg["d0"])
    print(stats.table(), file=out)
    paths = [p for p in (cfg["checkpoint"] or "").split(",") if p]
    if not paths:
        return 0
    for path in paths:
        _require_file(path, "checkpoint")
    if not stats.per_record:
        print("no records: variant comparison skipped", file=out)
        return 0
    print(f"{'variant':>8} {'mse':>12} {'identity':>12} {'ratio':>8} {'d_tc':>10} {'d_lfr':>10}  checkpoint",
          file=out)
    for path in paths:
        params, model_cfg = checkpoint.load(path)
        row = variant_scores(params, model_cfg, cfg["data"], cfg["d0"])
        print(f"{model_cfg.variant.value:>8} {row['mse']:12.6f} {row['identity_mse']:12.6f} "
              f"{row['mse'] / row['identity_mse']:8.4f} {row['delta_tc']:+10.6f} "
              f"{row['delta_lfr']:+10.6f}  {path}", file=out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "refine": cmd_refine,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="noiseinit", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in _OPTIONS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value file; explicit flags override it")
        for flag, conv, default, help_text in options:
            suffix = f" (default: {_format_value(default)})" if default is not None else ""
            extra = {"nargs": "?", "const": True} if conv is parse_bool else {}
            p.add_argument("--" + flag, type=conv, default=None, help=help_text + suffix, **extra)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        echo_config(args.command, cfg, out)
        return COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"noiseinit {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"noiseinit {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
