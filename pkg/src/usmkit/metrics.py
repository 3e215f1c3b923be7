"""Objective metrics that need no neural model: F0 correlation and embedding cosine."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    InsufficientDataError,
    InvalidEmbeddingError,
    InvalidParameterError,
    ShapeError,
    UndefinedCorrelationError,
)


@dataclass(frozen=True, eq=False)
class F0Contour:
    """F0 values in Hz plus a voicing mask; unvoiced frames are ignored everywhere."""

    values: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        m = np.asarray(self.voiced, dtype=bool).reshape(-1)
        if v.shape != m.shape:
            raise ShapeError("values and voiced mask differ in length")
        if not np.isfinite(v[m]).all() or (v[m] <= 0).any():
            raise InvalidParameterError("voiced F0 values must be finite and > 0")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "voiced", m)

    @classmethod
    def from_hz(cls, hz) -> "F0Contour":
        """Build from a plain Hz array where ``0`` (or less) means unvoiced."""
        hz = np.asarray(hz, dtype=np.float64).reshape(-1)
        voiced = hz > 0
        return cls(np.where(voiced, hz, 0.0), voiced)

    def __len__(self):
        return self.values.size

    def mean(self) -> float:
        if not self.voiced.any():
            raise InsufficientDataError("contour has no voiced frames")
        return float(self.values[self.voiced].mean())


def read_f0_text(path) -> F0Contour:
    """Two columns per line, ``frame_index hz``; ``hz == 0`` marks unvoiced.

    Rows are placed by frame index; missing indices are unvoiced.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ShapeError(f"{path}:{lineno}: expected 'frame_index hz'")
        try:
            rows.append((int(parts[0]), float(parts[1])))
        except ValueError:
            raise ShapeError(f"{path}:{lineno}: cannot parse {line!r}") from None
    if not rows:
        return F0Contour.from_hz(np.zeros(0))
    idx = np.array([r[0] for r in rows])
    if (idx < 0).any():
        raise ShapeError(f"{path}: negative frame index")
    hz = np.zeros(idx.max() + 1)
    hz[idx] = [r[1] for r in rows]
    return F0Contour.from_hz(hz)


def write_f0_text(path, contour: F0Contour) -> None:
    hz = np.where(contour.voiced, contour.values, 0.0)
    Path(path).write_text("".join(f"{i} {v!r}\n" for i, v in enumerate(hz.tolist())))


def f0_ground_truth(src: F0Contour, mean_tar: float, mean_src: float) -> F0Contour:
    """Shift a source contour to the target register: ``f0 * mean_tar / mean_src``."""
    if not (mean_tar > 0 and mean_src > 0):
        raise InvalidParameterError("mean F0 values must be > 0")
    scaled = np.where(src.voiced, src.values * mean_tar / mean_src, 0.0)
    return F0Contour(scaled, src.voiced.copy())


def _joint(pred: F0Contour, gt: F0Contour, log_scale: bool):
    if len(pred) != len(gt):
        raise ShapeError(f"contours differ in length: {len(pred)} vs {len(gt)}")
    both = pred.voiced & gt.voiced
    a, b = pred.values[both], gt.values[both]
    if log_scale:
        a, b = np.log(a), np.log(b)
    return a, b


def fpc(pred: F0Contour, gt: F0Contour, log_scale: bool = False) -> float:
    """Pearson correlation over frames voiced in both contours."""
    a, b = _joint(pred, gt, log_scale)
    if a.size < 2:
        raise InsufficientDataError(f"need >= 2 jointly voiced frames, got {a.size}")
    a = a - a.mean()
    b = b - b.mean()
    saa, sbb = float(a @ a), float(b @ b)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelationError("F0 contour has zero variance")
    r = float(a @ b) / np.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


def log_f0_l1(pred: F0Contour, gt: F0Contour) -> float:
    """Mean absolute difference of log F0 over jointly voiced frames."""
    a, b = _joint(pred, gt, log_scale=True)
    if a.size < 1:
        raise InsufficientDataError("no jointly voiced frames")
    return float(np.abs(a - b).mean())


def cosine_ssim(emb_a, emb_b) -> float:
    a = np.asarray(emb_a, dtype=np.float64).reshape(-1)
    b = np.asarray(emb_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"embedding sizes differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidEmbeddingError("zero embedding vector")
    return float(min(1.0, max(-1.0, float(a @ b) / (na * nb))))
