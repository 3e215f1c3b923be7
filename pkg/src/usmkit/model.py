"""Domain types shared across the toolkit.

Arrays held by the immutable types are flagged read-only on construction.
Only :class:`StatsAccumulator` is mutable, and it is meant to have a single
writer; parallel work uses one accumulator per worker plus a merge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import DataError, InvalidDimensionError, InvalidWeightsError, ShapeError

#: Per-frame tolerance on posterior mass before a frame is rejected.
POSTERIOR_SUM_TOL = 1e-5
#: Tolerance on the mixing-weight sum.
WEIGHT_SUM_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _float_array(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T content frames of dimension d for one utterance.

    ``frames`` keeps float32 or float64 as given; other dtypes become float64.
    An empty sequence needs ``frames`` of shape ``(0, d)``.
    """

    frames: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""

    def __post_init__(self):
        frames = _float_array(self.frames, "frames")
        if frames.ndim != 2:
            raise ShapeError(f"frames must be 2-D (T, d), got shape {frames.shape}")
        if frames.shape[1] < 1:
            raise InvalidDimensionError("feature dimension must be >= 1")
        bad = ~np.isfinite(frames)
        if bad.any():
            t = int(np.argwhere(bad)[0, 0])
            raise DataError(
                f"non-finite feature value in utterance {self.utterance_id!r} at frame {t}"
            )
        object.__setattr__(self, "frames", _frozen(frames))

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self):
        return self.num_frames


@dataclass(frozen=True, eq=False)
class PosteriorSequence:
    """Per-frame class posteriors, dense ``(T, K)`` or sparse CSR.

    Values are kept exactly as given so that file round-trips are lossless;
    every frame must sum to 1 within ``POSTERIOR_SUM_TOL``. Consumers use
    :meth:`normalized_dense` / :meth:`normalized_csr`, which rescale each
    frame to unit mass in float64.
    """

    num_classes: int
    dense: Optional[np.ndarray] = None
    indptr: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    utterance_id: str = ""

    def __post_init__(self):
        K = int(self.num_classes)
        if K < 1:
            raise InvalidDimensionError("number of classes must be >= 1")
        object.__setattr__(self, "num_classes", K)
        if self.dense is not None:
            dense = _float_array(self.dense, "dense")
            if dense.ndim != 2 or dense.shape[1] != K:
                raise ShapeError(f"dense posteriors must have shape (T, {K}), got {dense.shape}")
            self._check_values(dense, lambda i: i // K)
            sums = dense.sum(axis=1, dtype=np.float64)
            object.__setattr__(self, "dense", _frozen(dense))
        else:
            if self.indptr is None or self.indices is None or self.values is None:
                raise ShapeError("posteriors need either dense values or indptr/indices/values")
            indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
            indices = np.ascontiguousarray(self.indices, dtype=np.int64)
            values = _float_array(self.values, "values")
            if indptr.ndim != 1 or indptr.size < 1 or indptr[0] != 0:
                raise ShapeError("indptr must be 1-D and start at 0")
            if np.any(np.diff(indptr) < 0) or indptr[-1] != values.size or indices.shape != values.shape:
                raise ShapeError("inconsistent sparse posterior arrays")
            if indices.size and (indices.min() < 0 or indices.max() >= K):
                raise ShapeError(f"sparse posterior index out of range [0, {K})")
            rows = np.repeat(np.arange(indptr.size - 1), np.diff(indptr))
            self._check_values(values, lambda i: int(rows[i]))
            sums = np.zeros(indptr.size - 1)
            np.add.at(sums, rows, values)
            for name, a in (("indptr", indptr), ("indices", indices), ("values", values)):
                object.__setattr__(self, name, _frozen(a))
        off = np.abs(sums - 1.0) > POSTERIOR_SUM_TOL
        if off.any():
            t = int(np.argmax(off))
            raise DataError(
                f"posterior frame {t} of utterance {self.utterance_id!r} sums to {sums[t]!r}, "
                f"not 1 within {POSTERIOR_SUM_TOL}"
            )

    def _check_values(self, a, frame_of):
        flat = a.reshape(-1)
        bad = ~np.isfinite(flat) | (flat < 0)
        if bad.any():
            t = frame_of(int(np.argmax(bad)))
            raise DataError(
                f"invalid posterior value in utterance {self.utterance_id!r} at frame {t}"
            )

    @classmethod
    def from_dense(cls, dense, utterance_id: str = "") -> "PosteriorSequence":
        dense = np.asarray(dense)
        return cls(num_classes=dense.shape[-1], dense=dense, utterance_id=utterance_id)

    @classmethod
    def from_sparse(cls, num_classes, indptr, indices, values, utterance_id="") -> "PosteriorSequence":
        return cls(num_classes=num_classes, indptr=indptr, indices=indices,
                   values=values, utterance_id=utterance_id)

    @property
    def representation(self) -> str:
        return "dense" if self.dense is not None else "sparse"

    @property
    def num_frames(self) -> int:
        if self.dense is not None:
            return self.dense.shape[0]
        return self.indptr.size - 1

    def __len__(self):
        return self.num_frames

    @cached_property
    def _row_sums(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense.sum(axis=1, dtype=np.float64)
        return np.add.reduceat(self.values.astype(np.float64), self.indptr[:-1]) \
            if self.values.size else np.zeros(self.num_frames)

    def normalized_dense(self) -> np.ndarray:
        """Float64 ``(T, K)`` matrix with every row summing to 1."""
        if self.dense is not None:
            return self.dense.astype(np.float64) / self._row_sums[:, None]
        out = np.zeros((self.num_frames, self.num_classes))
        indptr, indices, values = self.normalized_csr()
        rows = np.repeat(np.arange(self.num_frames), np.diff(indptr))
        out[rows, indices] = values
        return out

    def normalized_csr(self):
        """``(indptr, indices, values)`` with float64 values normalized per row."""
        if self.dense is None:
            counts = np.diff(self.indptr)
            vals = self.values.astype(np.float64) / np.repeat(self._row_sums, counts)
            return self.indptr, self.indices, vals
        rows, cols = np.nonzero(self.dense)
        indptr = np.zeros(self.num_frames + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.num_frames), out=indptr[1:])
        vals = self.dense[rows, cols].astype(np.float64) / self._row_sums[rows]
        return indptr, cols.astype(np.int64), vals

    def topk(self, n: int) -> "PosteriorSequence":
        """Sparse copy keeping the ``n`` largest non-zero values per frame, renormalized."""
        dense = self.dense if self.dense is not None else self.normalized_dense()
        indptr, indices, values = topk_arrays(dense, n)
        sums = np.add.reduceat(values.astype(np.float64), indptr[:-1]) if values.size else values
        values = values / np.repeat(sums, np.diff(indptr))
        return PosteriorSequence.from_sparse(self.num_classes, indptr, indices, values, self.utterance_id)


def topk_arrays(dense: np.ndarray, n: int):
    """CSR arrays of the ``n`` largest non-zero values of each row, not rescaled.

    Ties go to the lower class index; indices within a row are ascending.
    """
    if n < 1:
        raise InvalidDimensionError("top-k size must be >= 1")
    T, K = dense.shape
    n = min(n, K)
    # stable sort on negated values keeps lower indices first among ties
    order = np.argsort(-dense, axis=1, kind="stable")[:, :n]
    kept = np.take_along_axis(dense, order, axis=1)
    order = np.sort(np.where(kept > 0, order, K), axis=1)
    mask = order < K
    nnz = mask.sum(axis=1)
    indptr = np.zeros(T + 1, dtype=np.int64)
    np.cumsum(nnz, out=indptr[1:])
    indices = order[mask].astype(np.int64)
    values = dense[np.repeat(np.arange(T), nnz), indices]
    return indptr, indices, values


@dataclass(eq=False)
class StatsAccumulator:
    """Zero-order counts and un-normalized first-order sums.

    Totals are carried as unevaluated float64 pairs ``hi + lo``: ``counts``
    and ``sums`` hold the rounded totals and ``counts_lo`` / ``sums_lo`` the
    residuals, which keeps results independent of summation order to ~1 ulp.
    """

    K: int
    d: int
    counts: np.ndarray = None
    sums: np.ndarray = None
    frames_seen: int = 0
    counts_lo: np.ndarray = None
    sums_lo: np.ndarray = None

    def __post_init__(self):
        if self.K < 1 or self.d < 1:
            raise InvalidDimensionError(f"K and d must be >= 1, got K={self.K}, d={self.d}")
        for name, shape in (("counts", (self.K,)), ("sums", (self.K, self.d)),
                            ("counts_lo", (self.K,)), ("sums_lo", (self.K, self.d))):
            a = getattr(self, name)
            a = np.zeros(shape) if a is None else np.array(a, dtype=np.float64, order="C")
            if a.shape != shape:
                raise ShapeError(f"accumulator {name} has shape {a.shape}, expected {shape}")
            setattr(self, name, a)

    def copy(self) -> "StatsAccumulator":
        return StatsAccumulator(self.K, self.d, self.counts.copy(), self.sums.copy(),
                                self.frames_seen, self.counts_lo.copy(), self.sums_lo.copy())


@dataclass(frozen=True, eq=False)
class SemanticDictionary:
    """K entries of dimension d; ``speaker_tag == ""`` marks the universal one.

    Entries with zero count are zero vectors, reported by :attr:`empty`.
    """

    entries: np.ndarray
    counts: np.ndarray
    speaker_tag: str = ""

    def __post_init__(self):
        entries = _float_array(self.entries, "entries")
        counts = np.ascontiguousarray(self.counts, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise InvalidDimensionError(f"entries must be a non-empty (K, d) matrix, got {entries.shape}")
        if counts.shape != (entries.shape[0],):
            raise ShapeError("counts length must equal number of entries")
        object.__setattr__(self, "entries", _frozen(entries))
        object.__setattr__(self, "counts", _frozen(counts))

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def is_universal(self) -> bool:
        return self.speaker_tag == ""


@dataclass(frozen=True)
class MixWeights:
    """Residual mix weights: universal re-expression, skip, optional speaker re-expression."""

    w1: float
    w2: float
    w3: Optional[float] = None

    def __post_init__(self):
        ws = [self.w1, self.w2] + ([] if self.w3 is None else [self.w3])
        for w in ws:
            if not (0.0 <= w <= 1.0):
                raise InvalidWeightsError(f"weight {w!r} outside [0, 1]")
        if abs(sum(ws) - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidWeightsError(f"weights {tuple(ws)} do not sum to 1")

    def as_tuple(self):
        return (self.w1, self.w2) if self.w3 is None else (self.w1, self.w2, self.w3)


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    training_inertia: float = 0.0

    def __post_init__(self):
        c = _float_array(self.centroids, "centroids")
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] < 1:
            raise InvalidDimensionError(f"centroids must be a non-empty (K, d) matrix, got {c.shape}")
        if not np.isfinite(c).all():
            raise DataError("codebook centroids must be finite")
        object.__setattr__(self, "centroids", _frozen(c))

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]
