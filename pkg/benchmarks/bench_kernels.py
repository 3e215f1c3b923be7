"""Time each hot kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

Prints one row per kernel with the best wall time of each backend and the
speedup. The first numba call (compilation) is excluded.
"""

import argparse
import time

import numpy as np

from usmkit import _kernels


def _cases(scale, rng):
    T, K, d = int(20000 * scale), 600, 256
    x = rng.standard_normal((T, d))
    gamma = rng.random((T, 64))
    gamma /= gamma.sum(axis=1, keepdims=True)
    nnz = 5
    indptr = np.arange(0, T * nnz + 1, nnz, dtype=np.int64)
    indices = rng.integers(0, K, size=T * nnz).astype(np.int64)
    values = rng.random(T * nnz)
    entries = rng.standard_normal((K, d))
    cents = rng.standard_normal((256, d))
    labels = rng.integers(0, 256, size=T).astype(np.int64)

    def dense(k):
        return lambda: k(x, gamma, np.zeros(64), np.zeros((64, d)))

    def sparse(k):
        return lambda: k(x, indptr, indices, values, np.zeros(K), np.zeros((K, d)))

    def project(k):
        return lambda: k(indptr, indices, values, entries, np.empty((T, d)))

    def nearest(k):
        return lambda: k(x, cents, np.empty(T, np.int64), np.empty(T))

    def update(k):
        return lambda: k(x, x[0], np.full(T, np.inf))

    def sums(k):
        return lambda: k(x, labels, np.zeros((256, d)), np.zeros(256))

    return {
        "accumulate_dense": dense,
        "accumulate_sparse": sparse,
        "sparse_project": project,
        "nearest": nearest,
        "min_dist2_update": update,
        "cluster_sums": sums,
    }


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0, help="multiplies the frame count")
    args = ap.parse_args(argv)

    cases = _cases(args.scale, np.random.default_rng(0))
    print(f"{'kernel':<20}{'numba s':>12}{'numpy s':>12}{'speedup':>10}")
    for name in _kernels.KERNEL_NAMES:
        make = cases[name]
        nb = make(_kernels.get(name, "numba"))
        nb()  # compile
        t_nb = _best(nb, args.repeat)
        t_np = _best(make(_kernels.get(name, "numpy")), args.repeat)
        print(f"{name:<20}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
