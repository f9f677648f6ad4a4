"""Compare the compiled and pure-Python kernels.

    python benchmarks/bench_kernels.py [--repeats 3] [--size 200000]

Both backends must produce identical output for the same generator state;
the script checks that before timing.
"""

import argparse
import time

import numpy as np

from nptl._kernels import _pykernels

try:
    from nptl._kernels import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size):
    shapes_one = np.ones(size)
    shapes_small = np.full(size, 1e-3)
    rng = np.random.default_rng(0)
    pooled = np.sort(rng.standard_normal(2000))
    labels = rng.permuted(np.tile(np.repeat([0, 1], 1000).astype(np.uint8), (200, 1)), axis=1)
    return {
        f"log_gamma_fill shape=1 x{size}": lambda k: k.log_gamma_fill(shapes_one, np.random.default_rng(1)),
        f"log_gamma_fill shape=1e-3 x{size}": lambda k: k.log_gamma_fill(shapes_small, np.random.default_rng(1)),
        "ks_perm_stats 200 perms x 2000": lambda k: k.ks_perm_stats(pooled, labels, 1000, 1000),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--size", type=int, default=200_000)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; only the Python backend is available")
    print(f"{'kernel':<36} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for name, fn in cases(args.size).items():
        py = best_of(lambda: fn(_pykernels), args.repeats)
        if _ckernels is None:
            print(f"{name:<36} {py:>10.4f} {'-':>10} {'-':>8}")
            continue
        if not np.array_equal(fn(_pykernels), fn(_ckernels)):
            raise SystemExit(f"{name}: backends disagree")
        cy = best_of(lambda: fn(_ckernels), args.repeats)
        print(f"{name:<36} {py:>10.4f} {cy:>10.4f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
