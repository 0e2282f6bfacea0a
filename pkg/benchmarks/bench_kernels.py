"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--trials N] [--json PATH]

Each kernel runs on the same inputs under both implementations; the script
checks the outputs agree before reporting median times and the speedup.
"""
import argparse
import json
import statistics
import sys
import time

import numpy as np

from noiseinit import _kernels_py

try:
    from noiseinit import _kernels
except ImportError:
    _kernels = None

CASES = {
    "dwconv3d_forward": lambda rng, shape: (
        rng.standard_normal(shape), rng.standard_normal((shape[0], 3, 3, 3))),
    "dwconv3d_backward": lambda rng, shape: (
        rng.standard_normal(shape), rng.standard_normal((shape[0], 3, 3, 3)), rng.standard_normal(shape)),
    "ema_scan": lambda rng, shape: (rng.standard_normal(shape), 0.8),
}
SHAPES = [(32, 2, 4, 4), (32, 4, 16, 16), (4, 16, 64, 64)]


def _as_tuple(out):
    return out if isinstance(out, tuple) else (out,)


def median_time(fn, args, trials):
    fn(*args)
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def run(trials):
    rng = np.random.default_rng(0)
    rows = []
    for name, make in CASES.items():
        for shape in SHAPES:
            args = make(rng, shape)
            fallback = getattr(_kernels_py, name)
            row = {"kernel": name, "shape": list(shape), "python_s": median_time(fallback, args, trials)}
            if _kernels is not None:
                compiled = getattr(_kernels, name)
                for a, b in zip(_as_tuple(fallback(*args)), _as_tuple(compiled(*args))):
                    np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-10)
                row["cython_s"] = median_time(compiled, args, trials)
                row["speedup"] = row["python_s"] / row["cython_s"]
            rows.append(row)
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--trials", type=int, default=7)
    parser.add_argument("--json", help="also write the rows as JSON")
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    rows = run(args.trials)
    print(f"{'kernel':<18} {'shape':<16} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for r in rows:
        cy = f"{1e3 * r['cython_s']:10.3f}" if "cython_s" in r else f"{'n/a':>10}"
        sp = f"{r['speedup']:8.2f}" if "speedup" in r else f"{'n/a':>8}"
        shape = "x".join(map(str, r["shape"]))
        print(f"{r['kernel']:<18} {shape:<16} {1e3 * r['python_s']:10.3f} {cy} {sp}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
