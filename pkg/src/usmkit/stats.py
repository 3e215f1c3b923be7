"""Posterior-weighted zero- and first-order statistics and dictionary building.

For a corpus of frames ``x_t`` with class posteriors ``gamma_t``::

    n_k = sum_t gamma_t[k]
    m_k = (1 / n_k) * sum_t gamma_t[k] * x_t

Statistics are additive, so partial accumulators over disjoint shards can be
merged in any order. Totals use compensated summation, so the order of
utterances and merges changes the result by at most about one ulp.
"""

from __future__ import annotations

import os
import threading
from typing import Iterable, Optional, Tuple

import numpy as np

from . import _kernels
from .errors import EmptyCorpusError, InvalidDimensionError, ShapeError
from .model import FeatureSequence, PosteriorSequence, SemanticDictionary, StatsAccumulator

Pair = Tuple[FeatureSequence, PosteriorSequence]


def new_accumulator(K: int, d: int) -> StatsAccumulator:
    if K < 1 or d < 1:
        raise InvalidDimensionError(f"K and d must be >= 1, got K={K}, d={d}")
    return StatsAccumulator(K, d)


def check_pair(features: FeatureSequence, posteriors: PosteriorSequence,
               K: Optional[int] = None, d: Optional[int] = None) -> None:
    if d is not None and features.dim != d:
        raise ShapeError(
            f"utterance {features.utterance_id!r}: feature dim {features.dim} != {d}")
    if K is not None and posteriors.num_classes != K:
        raise ShapeError(
            f"utterance {features.utterance_id!r}: posterior classes {posteriors.num_classes} != {K}")
    if features.num_frames != posteriors.num_frames:
        raise ShapeError(
            f"utterance {features.utterance_id!r}: {features.num_frames} feature frames "
            f"vs {posteriors.num_frames} posterior frames")


def _two_sum_into(hi: np.ndarray, lo: np.ndarray, x: np.ndarray, rows=None) -> None:
    """``(hi, lo) += x`` in double-double arithmetic, optionally on ``rows`` only."""
    h = hi if rows is None else hi[rows]
    l = lo if rows is None else lo[rows]
    s = h + x
    bp = s - h
    err = (h - (s - bp)) + (x - bp)
    l = l + err
    new_hi = s + l
    new_lo = l - (new_hi - s)
    if rows is None:
        hi[...] = new_hi
        lo[...] = new_lo
    else:
        hi[rows] = new_hi
        lo[rows] = new_lo


def accumulate(acc: StatsAccumulator, features: FeatureSequence,
               posteriors: PosteriorSequence, backend: Optional[str] = None) -> StatsAccumulator:
    """Add one utterance's statistics to ``acc`` in place and return it.

    Sparse posteriors contribute only their stored entries. Each frame is
    rescaled to unit mass first, so ``sum(counts) == frames_seen`` holds.
    The utterance total is formed over the classes it touches and then added
    to the running totals with compensated summation.
    """
    check_pair(features, posteriors, acc.K, acc.d)
    T = features.num_frames
    if T == 0:
        return acc
    x = np.ascontiguousarray(features.frames, dtype=np.float64)
    indptr, indices, values = posteriors.normalized_csr()
    touched, local = np.unique(indices, return_inverse=True)
    counts = np.zeros(touched.size)
    sums = np.zeros((touched.size, acc.d))
    if posteriors.representation == "dense" and touched.size == acc.K:
        gamma = np.ascontiguousarray(posteriors.normalized_dense())
        _kernels.get("accumulate_dense", backend)(x, gamma, counts, sums)
    else:
        _kernels.get("accumulate_sparse", backend)(
            x, np.ascontiguousarray(indptr), np.ascontiguousarray(local, dtype=np.int64),
            np.ascontiguousarray(values), counts, sums)
    _two_sum_into(acc.counts, acc.counts_lo, counts, touched)
    _two_sum_into(acc.sums, acc.sums_lo, sums, touched)
    acc.frames_seen += T
    return acc


def merge(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    if a.K != b.K or a.d != b.d:
        raise ShapeError(f"cannot merge accumulators of shape ({a.K}, {a.d}) and ({b.K}, {b.d})")
    out = a.copy()
    _two_sum_into(out.counts, out.counts_lo, b.counts)
    _two_sum_into(out.sums, out.sums_lo, b.sums)
    _two_sum_into(out.counts, out.counts_lo, b.counts_lo)
    _two_sum_into(out.sums, out.sums_lo, b.sums_lo)
    out.frames_seen += b.frames_seen
    return out


def merge_all(accs: Iterable[StatsAccumulator]) -> StatsAccumulator:
    accs = list(accs)
    if not accs:
        raise EmptyCorpusError("no accumulators to merge")
    out = accs[0].copy()
    for other in accs[1:]:
        out = merge(out, other)
    return out


def finalize(acc: StatsAccumulator, speaker_tag: str = "") -> SemanticDictionary:
    """Divide sums by counts. Zero-count classes become zero vectors."""
    seen = acc.counts > 0
    entries = np.zeros_like(acc.sums)
    entries[seen] = acc.sums[seen] / acc.counts[seen, None]
    return SemanticDictionary(entries=entries, counts=acc.counts.copy(), speaker_tag=speaker_tag)


def resolve_threads(threads: Optional[int] = None) -> int:
    """``threads`` if given, else ``$USM_THREADS``, else the CPU count."""
    if threads is None:
        env = os.environ.get("USM_THREADS", "").strip()
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def accumulate_corpus(corpus: Iterable[Pair], K: int, d: int,
                      speaker_filter: Optional[str] = None,
                      threads: Optional[int] = 1,
                      backend: Optional[str] = None) -> StatsAccumulator:
    """Accumulate every pair of ``corpus`` (optionally one speaker only).

    With ``threads > 1`` each worker owns an accumulator and pulls pairs from
    the shared iterator; the partials are merged in worker order. Which worker
    sees which utterance is not fixed, but compensated summation keeps the
    totals within about one ulp of the single-threaded ones.
    """
    threads = resolve_threads(threads)
    it = iter(corpus)
    lock = threading.Lock()

    def _keep(pair):
        return speaker_filter is None or pair[0].speaker_id == speaker_filter

    if threads == 1:
        acc = new_accumulator(K, d)
        for pair in it:
            if _keep(pair):
                accumulate(acc, *pair, backend=backend)
        return acc

    accs = [new_accumulator(K, d) for _ in range(threads)]
    errors = []

    def _work(acc):
        while True:
            with lock:
                if errors:
                    return
                try:
                    pair = next(it)
                except StopIteration:
                    return
                except BaseException as exc:  # surfaced in the caller
                    errors.append(exc)
                    return
            if not _keep(pair):
                continue
            try:
                accumulate(acc, *pair, backend=backend)
            except BaseException as exc:
                with lock:
                    errors.append(exc)
                return

    workers = [threading.Thread(target=_work, args=(a,)) for a in accs]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    if errors:
        raise errors[0]
    return merge_all(accs)


def build_dictionary(corpus: Iterable[Pair], K: int, d: int,
                     speaker_filter: Optional[str] = None,
                     threads: Optional[int] = 1,
                     speaker_tag: Optional[str] = None) -> SemanticDictionary:
    """Accumulate and finalize in one go.

    The dictionary is tagged with ``speaker_filter`` unless ``speaker_tag``
    says otherwise; an unfiltered build is universal.
    """
    acc = accumulate_corpus(corpus, K, d, speaker_filter=speaker_filter, threads=threads)
    if acc.frames_seen == 0:
        who = f" for speaker {speaker_filter!r}" if speaker_filter is not None else ""
        raise EmptyCorpusError(f"no frames to build a dictionary from{who}")
    if speaker_tag is None:
        speaker_tag = speaker_filter or ""
    return finalize(acc, speaker_tag)
