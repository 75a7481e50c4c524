"""Time the numpy and numba kernel sets against each other.

Runs each hot kernel on shapes taken from the training path (32px images,
d=64 model) plus one deliberately larger set, and prints a per-kernel
table with the speedup of numba over numpy.  Numba functions get one
untimed warmup call so JIT compilation never lands in a measurement.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--dtype f32|f64]

Numbers are best-of-N wall times on a single thread; pin BLAS threads
(OMP_NUM_THREADS=1) if you want them stable.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from vqagpt import kernels


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_cases(dtype):
    rng = np.random.default_rng(0)

    def arr(*shape):
        return rng.standard_normal(shape).astype(dtype)

    # (label, kwargs per backend call)
    cases = []

    x_small = arr(16, 8, 16, 16)
    x_large = arr(64, 16, 32, 32)
    for label, x in (("im2col 16x8x16x16 k3", x_small), ("im2col 64x16x32x32 k3", x_large)):
        cases.append((label, lambda k, x=x: k["im2col"](x, 3, 3, 1, 1)))

    cols_small = kernels.im2col_numpy(x_small, 3, 3, 1, 1)
    cols_large = kernels.im2col_numpy(x_large, 3, 3, 1, 1)
    cases.append(
        ("col2im 16x8x16x16 k3", lambda k: k["col2im"](cols_small, x_small.shape, 3, 3, 1, 1))
    )
    cases.append(
        ("col2im 64x16x32x32 k3", lambda k: k["col2im"](cols_large, x_large.shape, 3, 3, 1, 1))
    )

    ids = rng.integers(0, 64, size=(32, 12)).astype(np.int64)
    rows = arr(32, 12, 64)

    def scatter(k):
        table = np.zeros((64, 64), dtype=dtype)
        k["scatter_add_rows"](table, ids, rows)

    cases.append(("scatter_add 384 rows d=64", scatter))

    n = 1_000_000
    param = arr(n)
    grad = arr(n)

    def adam(k):
        p = param.copy()
        m = np.zeros(n, dtype=dtype)
        v = np.zeros(n, dtype=dtype)
        k["adam_update"](p, grad, m, v, 1e-3, 0.9, 0.95, 1e-8, 0.1, 0.05)

    cases.append(("adam_update 1e6 params", adam))
    return cases


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    args = ap.parse_args()
    dtype = np.float32 if args.dtype == "f32" else np.float64

    numpy_set = kernels._NUMPY_SET
    numba_set = kernels._NUMBA_SET if kernels.HAS_NUMBA else None
    if numba_set is None:
        print("numba is not installed; timing the numpy set only")

    cases = bench_cases(dtype)
    width = max(len(label) for label, _ in cases)
    header = f"{'kernel':<{width}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, call in cases:
        t_np = best_of(lambda: call(numpy_set), args.repeats) * 1e3
        if numba_set is not None:
            call(numba_set)  # warmup: JIT compile outside the timed region
            t_nb = best_of(lambda: call(numba_set), args.repeats) * 1e3
            print(f"{label:<{width}}  {t_np:>10.3f}  {t_nb:>10.3f}  {t_np / t_nb:>7.2f}x")
        else:
            print(f"{label:<{width}}  {t_np:>10.3f}  {'-':>10}  {'-':>8}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
