"""Time the numba kernels against the pure-numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Both flavours are imported side by side, so one process measures both
regardless of ``CCDISTILL_DISABLE_NUMBA``.  Numba compile time is excluded by
a warm-up call.  A training-step timing for each backend is run in a
subprocess with the environment flag set accordingly.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ccdistill import _kernels

STEP_SNIPPET = """
import time
from ccdistill.train import TrainConfig, train
cfg = TrainConfig(iterations=1, val_every=1, val_scenes=1, seed=0)
train(cfg)
cfg = TrainConfig(iterations=10, val_every=1000, val_scenes=1, seed=0)
t = time.perf_counter(); train(cfg); print((time.perf_counter() - t) / 10)
"""


def _cases(rng):
    x32 = rng.standard_normal((4, 96, 96, 16)).astype(np.float32)
    cols = rng.standard_normal((4, 96, 96, 144)).astype(np.float32)
    vals = rng.standard_normal(96 * 96)
    labels = rng.integers(0, 4, vals.size)
    grid = rng.standard_normal((96, 96))
    valid = rng.random((96, 96)) > 0.1
    return {
        "im2col_reflect (4x96x96x16, f32)": ("im2col_reflect", (x32,)),
        "col2im_reflect (4x96x96x144, f32)": ("col2im_reflect", (cols, 4, 96, 96, 16)),
        "group_median_mad (9216 px, 4 groups)": ("group_median_mad", (vals, labels, 4)),
        "pool2x2_masked (96x96)": ("pool2x2_masked", (grid, valid)),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, (name, args) in _cases(rng).items():
        row = {"kernel": label}
        for backend, ns in (("numpy", _kernels.numpy_kernels), ("numba", _kernels.numba_kernels)):
            if ns is None:
                continue
            fn = getattr(ns, name)
            fn(*args)
            row[backend] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
        rows.append(row)
    return rows


def bench_step():
    out = {}
    for backend, flag in (("numpy", "1"), ("numba", "0")):
        env = dict(os.environ, CCDISTILL_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
        out[backend] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", metavar="PATH", help="also write the timings as JSON")
    ap.add_argument("--no-step", action="store_true", help="skip the end-to-end training-step timing")
    args = ap.parse_args(argv)
    rows = bench_kernels(args.repeat)
    print(f"{'kernel':40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for r in rows:
        nb = r.get("numba", float("nan"))
        print(f"{r['kernel']:40s} {1e3 * r['numpy']:10.3f} {1e3 * nb:10.3f} {r['numpy'] / nb:8.1f}x")
    result = {"kernels": rows}
    if not args.no_step:
        step = bench_step()
        result["train_step_seconds"] = step
        print(f"{'training iteration (batch 4, 96x96)':40s} {1e3 * step['numpy']:10.1f} {1e3 * step['numba']:10.1f} "
              f"{step['numpy'] / step['numba']:8.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2)
            fh.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
