"""Little-endian binary formats for features, posteriors, accumulators,
dictionaries and codebooks, plus the plain-text corpus manifest.

Every file is ``magic (4 bytes) | u32 version | header fields | u32 crc32 |
payload``. The CRC covers every header byte before it, magic included.
Strings are ``u32 byte length`` followed by UTF-8. Layouts after the version:

======  ==============================================================
USMF    u32 d, u64 T, u8 dtype(1=f32), str utterance_id, str speaker_id;
        payload T*d f32 row-major
USMP    u32 K, u64 T, u8 dtype(1=f32), u8 mode(0 dense, 1 sparse),
        str utterance_id; payload dense T*K f32, or per frame
        u16 nnz then nnz * (u32 index, f32 value)
USMA    u32 K, u32 d, u64 frames_seen; payload K f64 counts,
        K*d f64 sums, then the K + K*d f64 rounding residuals
USMD    u32 K, u32 d, u8 dtype(1=f32), str speaker_tag; payload K f64
        counts, K u8 empty flags, K*d f32 entries
USMC    u32 K, u32 d, u8 dtype(1=f32), f64 training inertia; payload
        K*d f32 centroids
======  ==============================================================
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

from .errors import FormatError, USMError
from .model import (
    Codebook,
    FeatureSequence,
    PosteriorSequence,
    SemanticDictionary,
    StatsAccumulator,
    topk_arrays,
)

VERSION = 1
DTYPE_F32 = 1
MODE_DENSE, MODE_SPARSE = 0, 1
MAX_STRING = 1 << 16
MAX_NNZ = 0xFFFF

MAGIC_FEATURES = b"USMF"
MAGIC_POSTERIORS = b"USMP"
MAGIC_ACCUMULATOR = b"USMA"
MAGIC_DICTIONARY = b"USMD"
MAGIC_CODEBOOK = b"USMC"

_SPARSE_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])


# ------------------------------------------------------------------ helpers

class _Header:
    def __init__(self, magic: bytes):
        self.buf = bytearray(magic)
        self.buf += struct.pack("<I", VERSION)

    def pack(self, fmt, *vals):
        self.buf += struct.pack("<" + fmt, *vals)

    def string(self, s: str):
        raw = s.encode("utf-8")
        if len(raw) > MAX_STRING:
            raise ValueError(f"string too long for header ({len(raw)} bytes)")
        self.pack("I", len(raw))
        self.buf += raw

    def finish(self) -> bytes:
        return bytes(self.buf) + struct.pack("<I", zlib.crc32(self.buf))


def _write(path, header: _Header, *payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.finish())
        for chunk in payload:
            fh.write(chunk)
    os.replace(tmp, path)


class _Reader:
    """Sequential reader that refuses to read past the real file size."""

    def __init__(self, fh, size: int):
        self.fh = fh
        self.size = size
        self.pos = 0
        self.header = bytearray()

    def take(self, n: int, what: str, header: bool = True) -> bytes:
        if n < 0 or self.pos + n > self.size:
            raise FormatError(
                f"truncated file: {what} needs {n} bytes, {self.size - self.pos} remain", self.pos)
        data = self.fh.read(n)
        if len(data) != n:
            raise FormatError(f"short read in {what}", self.pos)
        if header:
            self.header += data
        self.pos += n
        return data

    def unpack(self, fmt: str, what: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt), what))
        return vals if len(vals) > 1 else vals[0]

    def string(self, what: str) -> str:
        at = self.pos
        n = self.unpack("I", f"{what} length")
        if n > MAX_STRING:
            raise FormatError(f"{what} length {n} exceeds limit {MAX_STRING}", at)
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", at + 4) from None

    def prelude(self, magic: bytes):
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
        version = self.unpack("I", "version")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)

    def check_crc(self):
        at = self.pos
        expected = zlib.crc32(self.header)
        got = self.unpack("I", "header crc")
        if got != expected:
            raise FormatError(f"header checksum mismatch ({got:#010x} != {expected:#010x})", at)

    def expect_payload(self, nbytes: int, what: str):
        remain = self.size - self.pos
        if remain != nbytes:
            kind = "truncated" if remain < nbytes else "oversized"
            raise FormatError(
                f"{kind} {what}: expected {nbytes} bytes, found {remain}", self.pos)

    def array(self, dtype, count: int, what: str) -> np.ndarray:
        dtype = np.dtype(dtype)
        at = self.pos
        raw = self.take(dtype.itemsize * count, what, header=False)
        a = np.frombuffer(raw, dtype=dtype, count=count).copy()
        return a, at

    def done(self):
        if self.pos != self.size:
            raise FormatError(f"{self.size - self.pos} trailing bytes", self.pos)


def _open(path, magic):
    fh = open(path, "rb")
    size = os.fstat(fh.fileno()).st_size
    r = _Reader(fh, size)
    try:
        r.prelude(magic)
    except BaseException:
        fh.close()
        raise
    return fh, r


def _check_finite(a: np.ndarray, at: int, what: str):
    bad = ~np.isfinite(a)
    if bad.any():
        i = int(np.argmax(bad.reshape(-1)))
        raise FormatError(f"non-finite value in {what}", at + i * a.dtype.itemsize)


def _check_dtype(tag, at):
    if tag != DTYPE_F32:
        raise FormatError(f"unsupported dtype tag {tag}", at)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


# ----------------------------------------------------------------- features

def write_features(path, seq: FeatureSequence) -> None:
    h = _Header(MAGIC_FEATURES)
    h.pack("IQB", seq.dim, seq.num_frames, DTYPE_F32)
    h.string(seq.utterance_id)
    h.string(seq.speaker_id)
    _write(path, h, _f32(seq.frames))


def read_features(path) -> FeatureSequence:
    fh, r = _open(path, MAGIC_FEATURES)
    with fh:
        d, T = r.unpack("IQ", "dims")
        dtype_at = r.pos
        dtype = r.unpack("B", "dtype")
        uid = r.string("utterance_id")
        spk = r.string("speaker_id")
        r.check_crc()
        _check_dtype(dtype, dtype_at)
        if d < 1:
            raise FormatError("feature dimension must be >= 1", 8)
        r.expect_payload(4 * d * T, "feature payload")
        frames, at = r.array("<f4", d * T, "feature payload")
        _check_finite(frames, at, "feature payload")
        r.done()
    return FeatureSequence(frames.reshape(T, d), utterance_id=uid, speaker_id=spk)


# --------------------------------------------------------------- posteriors

def write_posteriors(path, seq: PosteriorSequence, mode: str = "dense",
                     topk: Optional[int] = None) -> None:
    """Write dense, or sparse keeping the ``topk`` largest values per frame.

    Sparse mode stores retained values unscaled; readers renormalize.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"mode must be 'dense' or 'sparse', got {mode!r}")
    K, T = seq.num_classes, seq.num_frames
    h = _Header(MAGIC_POSTERIORS)
    h.pack("IQBB", K, T, DTYPE_F32, MODE_DENSE if mode == "dense" else MODE_SPARSE)
    h.string(seq.utterance_id)
    if mode == "dense":
        if seq.representation == "dense":
            dense = seq.dense
        else:
            dense = np.zeros((T, K))
            rows = np.repeat(np.arange(T), np.diff(seq.indptr))
            dense[rows, seq.indices] = seq.values
        _write(path, h, _f32(dense))
        return
    if seq.representation == "dense":
        indptr, indices, values = topk_arrays(seq.dense, topk or K)
    elif topk is not None:
        indptr, indices, values = topk_arrays(seq.normalized_dense(), topk)
    else:
        indptr, indices, values = seq.indptr, seq.indices, seq.values
    nnz = np.diff(indptr)
    if nnz.size and nnz.max() > MAX_NNZ:
        raise ValueError(f"a frame keeps {nnz.max()} entries; the format allows {MAX_NNZ}")
    pairs = np.empty(values.size, dtype=_SPARSE_PAIR)
    pairs["index"] = indices
    pairs["value"] = values
    pair_bytes = pairs.tobytes()
    out = bytearray()
    for t in range(T):
        out += struct.pack("<H", nnz[t])
        out += pair_bytes[8 * indptr[t]:8 * indptr[t + 1]]
    _write(path, h, bytes(out))


def read_posteriors_raw(path) -> dict:
    """Header fields and stored arrays exactly as on disk, no renormalization.

    Returns a dict with ``num_classes``, ``mode`` ("dense"/"sparse"),
    ``utterance_id`` and either ``dense`` or ``indptr``/``indices``/``values``.
    """
    fh, r = _open(path, MAGIC_POSTERIORS)
    with fh:
        K, T = r.unpack("IQ", "dims")
        dtype_at = r.pos
        dtype, mode = r.unpack("BB", "dtype/mode")
        uid = r.string("utterance_id")
        r.check_crc()
        _check_dtype(dtype, dtype_at)
        if mode not in (MODE_DENSE, MODE_SPARSE):
            raise FormatError(f"unknown posterior mode {mode}", dtype_at + 1)
        if K < 1:
            raise FormatError("number of classes must be >= 1", 8)
        out = {"num_classes": K, "utterance_id": uid}
        if mode == MODE_DENSE:
            r.expect_payload(4 * K * T, "dense posterior payload")
            dense, at = r.array("<f4", K * T, "dense posterior payload")
            _check_finite(dense, at, "posterior payload")
            if (dense < 0).any():
                raise FormatError("negative posterior value", at + 4 * int(np.argmax(dense < 0)))
            out.update(mode="dense", dense=dense.reshape(T, K))
        else:
            # smallest possible frame is 2 bytes; reject absurd T before allocating
            if 2 * T > r.size - r.pos:
                raise FormatError(f"truncated sparse payload: {T} frames cannot fit", r.pos)
            start = r.pos
            raw = r.take(r.size - r.pos, "sparse posterior payload", header=False)
            buf = memoryview(raw)
            nnz = np.empty(T, dtype=np.int64)
            off = 0
            for t in range(T):
                if off + 2 > len(raw):
                    raise FormatError(f"truncated sparse payload at frame {t}", start + off)
                n = buf[off] | (buf[off + 1] << 8)
                if n > K:
                    raise FormatError(f"frame {t} stores {n} entries but K={K}", start + off)
                nnz[t] = n
                off += 2 + 8 * n
            if off != len(raw):
                kind = "truncated" if off > len(raw) else "oversized"
                raise FormatError(f"{kind} sparse payload: expected {off} bytes, found {len(raw)}",
                                  start + min(off, len(raw)))
            indptr = np.zeros(T + 1, dtype=np.int64)
            np.cumsum(nnz, out=indptr[1:])
            body = np.ones(len(raw), dtype=bool)
            hdr = 2 * np.arange(T) + 8 * indptr[:-1]
            body[hdr] = False
            body[hdr + 1] = False
            pairs = np.frombuffer(np.frombuffer(raw, dtype=np.uint8)[body].tobytes(), dtype=_SPARSE_PAIR)
            indices = pairs["index"].astype(np.int64)
            values = pairs["value"].copy()
            if indices.size and indices.max() >= K:
                p = int(np.argmax(indices >= K))
                raise FormatError(f"sparse index {indices[p]} >= K={K}", start + _pair_offset(p, indptr))
            bad = ~np.isfinite(values) | (values < 0)
            if bad.any():
                p = int(np.argmax(bad))
                raise FormatError("invalid sparse posterior value", start + _pair_offset(p, indptr) + 4)
            out.update(mode="sparse", indptr=indptr, indices=indices, values=values)
    return out


def _pair_offset(p: int, indptr: np.ndarray) -> int:
    t = int(np.searchsorted(indptr, p, side="right")) - 1
    return 2 * (t + 1) + 8 * p


def read_posteriors(path) -> PosteriorSequence:
    """Read a posterior file; sparse frames are rescaled to unit mass."""
    raw = read_posteriors_raw(path)
    K, uid = raw["num_classes"], raw["utterance_id"]
    try:
        if raw["mode"] == "dense":
            return PosteriorSequence(K, dense=raw["dense"], utterance_id=uid)
        indptr, values = raw["indptr"], raw["values"].astype(np.float64)
        nnz = np.diff(indptr)
        if (nnz == 0).any():
            raise FormatError(f"sparse frame {int(np.argmax(nnz == 0))} stores no entries")
        sums = np.add.reduceat(values, indptr[:-1]) if values.size else np.zeros(0)
        if (sums <= 0).any():
            raise FormatError(f"sparse frame {int(np.argmax(sums <= 0))} has no probability mass")
        values = values / np.repeat(sums, nnz)
        return PosteriorSequence.from_sparse(K, indptr, raw["indices"], values, utterance_id=uid)
    except FormatError:
        raise
    except USMError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -------------------------------------------------------------- accumulator

def write_accumulator(path, acc: StatsAccumulator) -> None:
    h = _Header(MAGIC_ACCUMULATOR)
    h.pack("IIQ", acc.K, acc.d, acc.frames_seen)
    _write(path, h, _f64(acc.counts), _f64(acc.sums), _f64(acc.counts_lo), _f64(acc.sums_lo))


def read_accumulator(path) -> StatsAccumulator:
    fh, r = _open(path, MAGIC_ACCUMULATOR)
    with fh:
        K, d, frames_seen = r.unpack("IIQ", "dims")
        r.check_crc()
        if K < 1 or d < 1:
            raise FormatError(f"invalid accumulator shape K={K}, d={d}", 8)
        r.expect_payload(2 * (8 * K + 8 * K * d), "accumulator payload")
        counts, at = r.array("<f8", K, "counts")
        _check_finite(counts, at, "counts")
        if (counts < 0).any():
            raise FormatError("negative count", at + 8 * int(np.argmax(counts < 0)))
        sums, at = r.array("<f8", K * d, "sums")
        _check_finite(sums, at, "sums")
        counts_lo, at = r.array("<f8", K, "count residuals")
        _check_finite(counts_lo, at, "count residuals")
        sums_lo, at = r.array("<f8", K * d, "sum residuals")
        _check_finite(sums_lo, at, "sum residuals")
        r.done()
    return StatsAccumulator(K, d, counts, sums.reshape(K, d), frames_seen,
                            counts_lo, sums_lo.reshape(K, d))


# --------------------------------------------------------------- dictionary

def write_dictionary(path, dictionary: SemanticDictionary) -> None:
    h = _Header(MAGIC_DICTIONARY)
    h.pack("IIB", dictionary.K, dictionary.d, DTYPE_F32)
    h.string(dictionary.speaker_tag)
    flags = dictionary.empty.astype(np.uint8)
    _write(path, h, _f64(dictionary.counts), flags.tobytes(), _f32(dictionary.entries))


def read_dictionary(path) -> SemanticDictionary:
    fh, r = _open(path, MAGIC_DICTIONARY)
    with fh:
        K, d = r.unpack("II", "dims")
        dtype_at = r.pos
        dtype = r.unpack("B", "dtype")
        tag = r.string("speaker_tag")
        r.check_crc()
        _check_dtype(dtype, dtype_at)
        if K < 1 or d < 1:
            raise FormatError(f"invalid dictionary shape K={K}, d={d}", 8)
        r.expect_payload(8 * K + K + 4 * K * d, "dictionary payload")
        counts, at = r.array("<f8", K, "counts")
        _check_finite(counts, at, "counts")
        if (counts < 0).any():
            raise FormatError("negative count", at + 8 * int(np.argmax(counts < 0)))
        flags, at = r.array("u1", K, "empty flags")
        if not np.array_equal(flags.astype(bool), counts == 0) or (flags > 1).any():
            raise FormatError("empty flags disagree with counts", at)
        entries, at = r.array("<f4", K * d, "entries")
        _check_finite(entries, at, "entries")
        r.done()
    return SemanticDictionary(entries.reshape(K, d), counts, speaker_tag=tag)


# ----------------------------------------------------------------- codebook

def write_codebook(path, cb: Codebook) -> None:
    h = _Header(MAGIC_CODEBOOK)
    h.pack("IIBd", cb.K, cb.d, DTYPE_F32, cb.training_inertia)
    _write(path, h, _f32(cb.centroids))


def read_codebook(path) -> Codebook:
    fh, r = _open(path, MAGIC_CODEBOOK)
    with fh:
        K, d = r.unpack("II", "dims")
        dtype_at = r.pos
        dtype, inertia = r.unpack("Bd", "dtype/inertia")
        r.check_crc()
        _check_dtype(dtype, dtype_at)
        if K < 1 or d < 1:
            raise FormatError(f"invalid codebook shape K={K}, d={d}", 8)
        if not (np.isfinite(inertia) and inertia >= 0):
            raise FormatError("invalid training inertia", dtype_at + 1)
        r.expect_payload(4 * K * d, "centroid payload")
        cents, at = r.array("<f4", K * d, "centroids")
        _check_finite(cents, at, "centroids")
        r.done()
    return Codebook(cents.reshape(K, d), training_inertia=inertia)


# ----------------------------------------------------------------- manifest

@dataclass(frozen=True)
class ManifestEntry:
    feature_path: Path
    posterior_path: Optional[Path] = None
    speaker_id: Optional[str] = None


def read_manifest(path) -> List[ManifestEntry]:
    """Parse a manifest: ``feature_path [posterior_path [speaker_id]]`` per line.

    Fields are whitespace separated, ``#`` starts a comment, ``-`` leaves a
    field empty, and relative paths resolve against the manifest's folder.
    """
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) > 3:
            raise FormatError(f"{path}:{lineno}: expected at most 3 fields, got {len(parts)}")
        parts += ["-"] * (3 - len(parts))
        feat, post, spk = parts
        entries.append(ManifestEntry(
            feature_path=base / feat,
            posterior_path=None if post == "-" else base / post,
            speaker_id=None if spk == "-" else spk,
        ))
    return entries


def write_manifest(path, entries) -> None:
    lines = []
    for e in entries:
        post = "-" if e.posterior_path is None else str(e.posterior_path)
        spk = "-" if e.speaker_id is None else e.speaker_id
        lines.append(f"{e.feature_path}\t{post}\t{spk}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def iter_corpus(entries, speaker: Optional[str] = None) -> Iterator:
    """Yield ``(FeatureSequence, PosteriorSequence)`` pairs from manifest entries.

    A manifest speaker id overrides the one stored in the feature file. With
    ``speaker`` set, entries whose manifest speaker differs are skipped
    without being opened.
    """
    for e in entries:
        if speaker is not None and e.speaker_id is not None and e.speaker_id != speaker:
            continue
        if e.posterior_path is None:
            raise FormatError(f"manifest entry {e.feature_path} has no posterior path")
        try:
            feats = read_features(e.feature_path)
            posts = read_posteriors(e.posterior_path)
        except FormatError as exc:
            raise FormatError(f"{exc} [file: {e.feature_path} / {e.posterior_path}]") from exc
        if e.speaker_id is not None and e.speaker_id != feats.speaker_id:
            feats = FeatureSequence(feats.frames, feats.utterance_id, e.speaker_id)
        if speaker is not None and feats.speaker_id != speaker:
            continue
        yield feats, posts
