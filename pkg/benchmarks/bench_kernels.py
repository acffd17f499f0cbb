#!/usr/bin/env python3
"""Compare the convolution kernel backends (numba jit vs pure numpy).

Runs the forward pass and the weight-gradient kernel at training-typical
and inference-typical shapes, printing best-of-N timings per backend.
The active backend for the package is chosen by DEEPAIR_BACKEND
("numba" | "numpy", default: numba when importable).

    python benchmarks/bench_kernels.py [--rounds 7] [--iters 200]
"""

import argparse
import time

import numpy as np

import deepair  # noqa: F401  (applies the single-thread BLAS cap)
from deepair import kernels

SHAPES = [
    # (label,                     batch, c_in, c_out, k, h, w)
    ("train patch  k=3", 8, 16, 16, 3, 9, 9),
    ("train stem   k=1", 8, 11, 16, 1, 9, 9),
    ("wide trunk   k=3", 48, 64, 64, 3, 15, 15),
    ("city frame   k=3", 1, 18, 64, 3, 44, 60),
]


def best_time(fn, rounds, iters):
    fn()  # warm-up / jit compile
    times = []
    for _ in range(rounds):
        t0 = time.perf_counter()
        for _ in range(iters):
            fn()
        times.append((time.perf_counter() - t0) / iters)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rounds", type=int, default=7)
    parser.add_argument("--iters", type=int, default=200)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"active backend: {kernels.active_backend()}")
    header = f"{'shape':<20} {'op':<8}" + "".join(
        f"{name:>12}" for name in sorted(kernels.BACKENDS)
    ) + f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    for label, b, ci, co, k, h, w in SHAPES:
        x = rng.normal(size=(b, ci, h, w))
        wgt = rng.normal(size=(co, ci, k, k))
        bias = np.zeros(co)
        go = rng.normal(size=(b, co, h, w))
        pad = (k - 1) // 2
        iters = max(10, args.iters // max(1, (b * ci * h * w) // 20000))

        rows = {"fwd": {}, "grad_w": {}}
        for name in sorted(kernels.BACKENDS):
            fwd, gw = kernels.BACKENDS[name]
            rows["fwd"][name] = best_time(lambda: fwd(x, wgt, bias, pad),
                                          args.rounds, iters)
            rows["grad_w"][name] = best_time(lambda: gw(x, go, k, pad),
                                             args.rounds, iters)
        for op, vals in rows.items():
            cells = "".join(f"{vals[name] * 1e3:>10.3f}ms"
                            for name in sorted(vals))
            if "numba" in vals and "numpy" in vals:
                ratio = vals["numpy"] / vals["numba"]
                cells += f"{ratio:>9.2f}x"
            print(f"{label:<20} {op:<8}{cells}")


if __name__ == "__main__":
    main()
