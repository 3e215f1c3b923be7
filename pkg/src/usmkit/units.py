"""k-means speech-unit codebooks: training, assignment, soft posteriors."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import InsufficientDataError, InvalidParameterError, ShapeError
from .model import Codebook, FeatureSequence, PosteriorSequence
from .stats import resolve_threads

log = logging.getLogger(__name__)

DEFAULT_K = 4096
#: Frames per work item. Fixed so results do not depend on the thread count.
CHUNK = 16384


def stack_frames(features: Sequence[FeatureSequence]) -> np.ndarray:
    dims = {f.dim for f in features}
    if len(dims) > 1:
        raise ShapeError(f"feature sequences disagree on dimension: {sorted(dims)}")
    if not features:
        return np.zeros((0, 0))
    return np.ascontiguousarray(np.concatenate([f.frames for f in features]), dtype=np.float64)


def _as_matrix(frames) -> np.ndarray:
    if isinstance(frames, FeatureSequence):
        return np.ascontiguousarray(frames.frames, dtype=np.float64)
    if isinstance(frames, (list, tuple)) and frames and isinstance(frames[0], FeatureSequence):
        return stack_frames(frames)
    a = np.ascontiguousarray(frames, dtype=np.float64)
    return a.reshape(1, -1) if a.ndim == 1 else a


def nearest(x: np.ndarray, centroids: np.ndarray, threads: int = 1,
            backend: Optional[str] = None):
    """Labels and squared distances of each row of ``x`` to its nearest centroid."""
    N = x.shape[0]
    labels = np.empty(N, dtype=np.int64)
    dist2 = np.empty(N)
    kern = _kernels.get("nearest", backend)
    c = np.ascontiguousarray(centroids, dtype=np.float64)
    spans = [(s, min(N, s + CHUNK)) for s in range(0, N, CHUNK)]
    if threads <= 1 or len(spans) <= 1:
        for s, e in spans:
            kern(x[s:e], c, labels[s:e], dist2[s:e])
    else:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda se: kern(x[se[0]:se[1]], c, labels[se[0]:se[1]],
                                          dist2[se[0]:se[1]]), spans))
    return labels, dist2


def _cluster_sums(x, labels, K, backend):
    sums = np.zeros((K, x.shape[1]))
    counts = np.zeros(K)
    kern = _kernels.get("cluster_sums", backend)
    # per-chunk partials merged in chunk order keep the result thread-independent
    for s in range(0, x.shape[0], CHUNK):
        ps = np.zeros_like(sums)
        pc = np.zeros_like(counts)
        kern(x[s:s + CHUNK], labels[s:s + CHUNK], ps, pc)
        sums += ps
        counts += pc
    return sums, counts


def kmeans_plusplus(x: np.ndarray, K: int, rng: np.random.Generator,
                    backend: Optional[str] = None) -> np.ndarray:
    """D^2-weighted seeding. Falls back to uniform picks once all mass is zero."""
    N = x.shape[0]
    chosen = np.empty(K, dtype=np.int64)
    chosen[0] = rng.integers(N)
    dist2 = np.full(N, np.inf)
    update = _kernels.get("min_dist2_update", backend)
    taken = np.zeros(N, dtype=bool)
    taken[chosen[0]] = True
    for i in range(1, K):
        update(x, x[chosen[i - 1]], dist2)
        total = dist2.sum()
        if total > 0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(dist2), r, side="right"))
            idx = min(idx, N - 1)
            if dist2[idx] == 0:  # guard against landing on a zero-mass slot via rounding
                idx = int(np.flatnonzero(dist2 > 0)[-1])
        else:
            idx = int(rng.choice(np.flatnonzero(~taken)))
        chosen[i] = idx
        taken[idx] = True
    return x[chosen].copy()


def kmeans_train(features, K: int = DEFAULT_K, max_iters: int = 100, tol: float = 1e-4,
                 seed: int = 0, threads: Optional[int] = 1, backend: Optional[str] = None,
                 history: Optional[List[float]] = None) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` updates or when the relative inertia improvement
    drops below ``tol``. Empty clusters are moved to the frames farthest from
    their current centroid. If ``history`` is given, the inertia of every
    assignment step is appended to it.
    """
    x = _as_matrix(features)
    N = x.shape[0]
    if K < 1:
        raise InvalidParameterError("K must be >= 1")
    if N < K:
        raise InsufficientDataError(f"{N} frames cannot support {K} clusters")
    if max_iters < 0 or tol < 0:
        raise InvalidParameterError("max_iters and tol must be non-negative")
    threads = resolve_threads(threads)
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, K, rng, backend)

    labels, dist2 = nearest(x, centroids, threads, backend)
    inertia = float(dist2.sum())
    if history is not None:
        history.append(inertia)
    for it in range(max_iters):
        sums, counts = _cluster_sums(x, labels, K, backend)
        filled = counts > 0
        new = centroids.copy()
        new[filled] = sums[filled] / counts[filled, None]
        n_empty = int((~filled).sum())
        if n_empty:
            far = np.argsort(-dist2, kind="stable")[:n_empty]
            new[~filled] = x[far]
            log.debug("iteration %d: reseeded %d empty clusters", it, n_empty)
        centroids = new
        labels, dist2 = nearest(x, centroids, threads, backend)
        prev, inertia = inertia, float(dist2.sum())
        if history is not None:
            history.append(inertia)
        log.debug("iteration %d: inertia %.6g", it, inertia)
        if inertia == 0.0 or (prev - inertia) <= tol * prev:
            break
    return Codebook(centroids=centroids, training_inertia=inertia)


def assign(cb: Codebook, frame) -> tuple:
    """Nearest centroid ``(unit, euclidean distance)``; ties go to the lowest index."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 1 or f.size != cb.d:
        raise ShapeError(f"frame of shape {f.shape} does not match codebook dim {cb.d}")
    labels, dist2 = nearest(f.reshape(1, -1), cb.centroids)
    return int(labels[0]), float(np.sqrt(dist2[0]))


def assign_sequence(cb: Codebook, features: FeatureSequence, threads: Optional[int] = 1):
    if features.dim != cb.d:
        raise ShapeError(f"feature dim {features.dim} != codebook dim {cb.d}")
    labels, dist2 = nearest(_as_matrix(features), cb.centroids, resolve_threads(threads))
    return labels, np.sqrt(dist2)


def _sq_distances(cb: Codebook, x: np.ndarray) -> np.ndarray:
    c = cb.centroids.astype(np.float64)
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _softmin(d2: np.ndarray, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise InvalidParameterError("temperature must be > 0")
    z = -(d2 - d2.min(axis=-1, keepdims=True)) / temperature
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def soft_posteriors(cb: Codebook, frame, temperature: float) -> np.ndarray:
    """``p[k]`` proportional to ``exp(-|frame - c_k|^2 / temperature)``."""
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 1 or f.size != cb.d:
        raise ShapeError(f"frame of shape {f.shape} does not match codebook dim {cb.d}")
    return _softmin(_sq_distances(cb, f.reshape(1, -1)), temperature)[0]


def soft_posterior_sequence(cb: Codebook, features: FeatureSequence,
                            temperature: float) -> PosteriorSequence:
    if features.dim != cb.d:
        raise ShapeError(f"feature dim {features.dim} != codebook dim {cb.d}")
    x = _as_matrix(features)
    out = np.empty((x.shape[0], cb.K))
    step = max(1, (1 << 22) // max(1, cb.K * cb.d))
    for s in range(0, x.shape[0], step):
        out[s:s + step] = _softmin(_sq_distances(cb, x[s:s + step]), temperature)
    return PosteriorSequence.from_dense(out, utterance_id=features.utterance_id)


def calibrate_temperature(cb: Codebook, features) -> float:
    """Mean squared nearest-centroid distance over ``features``.

    Returns 1.0 when that mean is zero (every frame sits on a centroid), since
    any positive temperature then yields the same one-hot posteriors.
    """
    x = _as_matrix(features)
    if x.shape[0] == 0:
        raise InsufficientDataError("no frames to calibrate the temperature on")
    _, dist2 = nearest(x, cb.centroids)
    tau = float(dist2.mean())
    return tau if tau > 0 else 1.0


def inertia(cb: Codebook, features) -> float:
    """Sum over frames of squared distance to the nearest centroid."""
    x = _as_matrix(features)
    if x.shape[0] == 0:
        return 0.0
    if x.shape[1] != cb.d:
        raise ShapeError(f"feature dim {x.shape[1]} != codebook dim {cb.d}")
    _, dist2 = nearest(x, cb.centroids)
    return float(dist2.sum())
