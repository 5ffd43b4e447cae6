#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Runs each hot kernel at training-representative sizes with both
implementations and prints a timing table. Invoke from the repo root:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from crossdiff.kernels import numpy_impl

try:
    from crossdiff.kernels import numba_impl
except ImportError:
    numba_impl = None


def timeit(fn, repeats):
    fn()  # warm-up (JIT compile on the numba side)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def bench_conv_kernels(repeats):
    rows = []
    for (n, c, h, w), k, s, p in [
        ((4, 16, 64, 64), 3, 1, 1),
        ((4, 32, 32, 32), 3, 1, 1),
        ((12, 64, 128, 128), 3, 2, 1),
        ((4, 16, 64, 64), 4, 2, 1),
    ]:
        x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
        cols = np.ascontiguousarray(numpy_impl.im2col(x, k, k, s, p))
        for name, mod in _impls():
            t_i = timeit(lambda: mod.im2col(x, k, k, s, p), repeats)
            t_c = timeit(lambda: mod.col2im(cols, n, c, h, w, k, k, s, p), repeats)
            rows.append((f"im2col {n}x{c}x{h}x{w} k{k}s{s}", name, t_i))
            rows.append((f"col2im {n}x{c}x{h}x{w} k{k}s{s}", name, t_c))
    return rows


def bench_propagation(repeats):
    rng = np.random.default_rng(1)
    from crossdiff.propagation import build_weights

    rows = []
    for side, steps in [(64, 200), (128, 200)]:
        g = build_weights(rng.uniform(size=(side, side)), neighborhood=8, sigma=0.1)
        labels = rng.uniform(size=side * side)
        for name, mod in _impls():
            t = timeit(lambda: mod.propagate_steps(labels, g.nbr_idx, g.weights,
                                                   steps, None, None), repeats)
            rows.append((f"propagate {side}x{side} x{steps}", name, t))
    return rows


def bench_staple(repeats):
    rng = np.random.default_rng(2)
    rows = []
    for pixels in (128 * 128, 448 * 448):
        d = (rng.uniform(size=(5, pixels)) < 0.05).astype(np.float64)
        p = rng.uniform(0.8, 0.99, 5)
        q = rng.uniform(0.8, 0.99, 5)
        for name, mod in _impls():
            t = timeit(lambda: mod.staple_estep(d, p, q, 0.05), repeats)
            rows.append((f"staple E-step 5x{pixels}px", name, t))
    return rows


def bench_stamping(repeats):
    rng = np.random.default_rng(3)
    ys = rng.uniform(0, 448, 2000)
    xs = rng.uniform(0, 448, 2000)
    rows = []
    for name, mod in _impls():
        def run():
            mask = np.zeros((448, 448), dtype=np.bool_)
            mod.stamp_disks(mask, ys, xs, 1.5)
        rows.append(("stamp_disks 2000pts/448px", name, timeit(run, repeats)))
    return rows


def _impls():
    impls = [("numpy", numpy_impl)]
    if numba_impl is not None:
        impls.append(("numba", numba_impl))
    return impls


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rows = []
    rows += bench_conv_kernels(args.repeats)
    rows += bench_propagation(max(args.repeats // 4, 3))
    rows += bench_staple(args.repeats)
    rows += bench_stamping(args.repeats)

    by_case = {}
    for case, name, ms in rows:
        by_case.setdefault(case, {})[name] = ms

    print(f"{'kernel':<36} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    print("-" * 68)
    for case, res in by_case.items():
        np_ms = res.get("numpy", float("nan"))
        nb_ms = res.get("numba")
        if nb_ms is None:
            print(f"{case:<36} {np_ms:>10.3f} {'n/a':>10} {'-':>8}")
        else:
            print(f"{case:<36} {np_ms:>10.3f} {nb_ms:>10.3f} {np_ms / nb_ms:>7.2f}x")
    if numba_impl is None:
        print("\nnumba unavailable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
