"""Hot numeric kernels, each in a numba and a pure-numpy flavour.

The numba path is used when numba imports and ``USM_DISABLE_NUMBA`` is unset
(or "0"). Both flavours compute the same quantities; summation order differs,
so results agree to rounding, not bit-for-bit. Every kernel writes into
caller-provided float64 buffers.
"""

import os

import numpy as np

_BLOCK_ELEMS = 1 << 22  # cap on N*K*d temporaries in the numpy distance path


# ---------------------------------------------------------------- numpy path

def accumulate_dense_np(x, gamma, counts, sums):
    counts += gamma.sum(axis=0)
    sums += gamma.T @ x


def accumulate_sparse_np(x, indptr, indices, values, counts, sums):
    rows = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
    np.add.at(counts, indices, values)
    np.add.at(sums, indices, values[:, None] * x[rows])


def sparse_project_np(indptr, indices, values, entries, out):
    rows = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
    np.add.at(out, rows, values[:, None] * entries[indices])


def nearest_np(x, centroids, labels, dist2):
    N, d = x.shape
    K = centroids.shape[0]
    step = max(1, _BLOCK_ELEMS // max(1, K * d))
    for s in range(0, N, step):
        diff = x[s:s + step, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        lab = np.argmin(d2, axis=1)  # first minimum -> lowest index on ties
        labels[s:s + step] = lab
        dist2[s:s + step] = d2[np.arange(lab.size), lab]


def min_dist2_update_np(x, c, dist2):
    diff = x - c
    np.minimum(dist2, np.einsum("nd,nd->n", diff, diff), out=dist2)


def cluster_sums_np(x, labels, sums, counts):
    np.add.at(sums, labels, x)
    counts += np.bincount(labels, minlength=counts.size)


# ---------------------------------------------------------------- numba path

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    njit = None

if njit is not None:

    @njit(nogil=True, cache=True)
    def accumulate_dense_nb(x, gamma, counts, sums):
        T, d = x.shape
        K = gamma.shape[1]
        for t in range(T):
            for k in range(K):
                g = gamma[t, k]
                if g != 0.0:
                    counts[k] += g
                    for j in range(d):
                        sums[k, j] += g * x[t, j]

    @njit(nogil=True, cache=True)
    def accumulate_sparse_nb(x, indptr, indices, values, counts, sums):
        d = x.shape[1]
        for t in range(indptr.size - 1):
            for p in range(indptr[t], indptr[t + 1]):
                k = indices[p]
                g = values[p]
                counts[k] += g
                for j in range(d):
                    sums[k, j] += g * x[t, j]

    @njit(nogil=True, cache=True)
    def sparse_project_nb(indptr, indices, values, entries, out):
        d = entries.shape[1]
        for t in range(indptr.size - 1):
            for p in range(indptr[t], indptr[t + 1]):
                k = indices[p]
                g = values[p]
                for j in range(d):
                    out[t, j] += g * entries[k, j]

    @njit(nogil=True, cache=True)
    def nearest_nb(x, centroids, labels, dist2):
        N, d = x.shape
        K = centroids.shape[0]
        for n in range(N):
            best = np.inf
            arg = 0
            for k in range(K):
                acc = 0.0
                for j in range(d):
                    diff = x[n, j] - centroids[k, j]
                    acc += diff * diff
                    if acc > best:
                        break
                if acc < best:
                    best = acc
                    arg = k
            labels[n] = arg
            dist2[n] = best

    @njit(nogil=True, cache=True)
    def min_dist2_update_nb(x, c, dist2):
        N, d = x.shape
        for n in range(N):
            acc = 0.0
            for j in range(d):
                diff = x[n, j] - c[j]
                acc += diff * diff
            if acc < dist2[n]:
                dist2[n] = acc

    @njit(nogil=True, cache=True)
    def cluster_sums_nb(x, labels, sums, counts):
        N, d = x.shape
        for n in range(N):
            k = labels[n]
            counts[k] += 1
            for j in range(d):
                sums[k, j] += x[n, j]


KERNEL_NAMES = (
    "accumulate_dense",
    "accumulate_sparse",
    "sparse_project",
    "nearest",
    "min_dist2_update",
    "cluster_sums",
)


#: Kernels where the numpy flavour (a BLAS matmul) beats numba; auto picks numpy.
PREFER_NUMPY = frozenset({"accumulate_dense"})


def numba_enabled() -> bool:
    if njit is None:
        return False
    return os.environ.get("USM_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


def get(name: str, backend: str | None = None):
    """Return kernel ``name`` for ``backend`` ("numba", "numpy", or None = auto)."""
    if name not in KERNEL_NAMES:
        raise KeyError(name)
    if backend is None:
        backend = "numba" if numba_enabled() and name not in PREFER_NUMPY else "numpy"
    if backend == "numba":
        if njit is None:
            raise RuntimeError("numba is not available")
        return globals()[name + "_nb"]
    if backend == "numpy":
        return globals()[name + "_np"]
    raise ValueError(f"unknown backend {backend!r}")


def backend() -> str:
    return "numba" if numba_enabled() else "numpy"
