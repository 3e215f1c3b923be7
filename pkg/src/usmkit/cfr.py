"""Content feature re-expression and the residual mixes.

A frame is re-expressed as the posterior-weighted combination of dictionary
entries, ``x_bar = entries.T @ p``. The frame itself never enters that
product, which is what strips speaker timbre. The residual mix then blends
``x_bar`` back with the original frame::

    usm  = w1 * x_bar + w2 * x
    usm* = w1 * x_bar_universal + w2 * x + w3 * x_bar_speaker
"""

from __future__ import annotations

import logging
import warnings
from typing import Optional

import numpy as np

from . import _kernels
from .errors import DataError, InvalidWeightsError, ShapeError, UnknownPresetError
from .model import (
    POSTERIOR_SUM_TOL,
    FeatureSequence,
    MixWeights,
    PosteriorSequence,
    SemanticDictionary,
)

log = logging.getLogger(__name__)

#: Residual weights per generator family (universal, skip[, speaker]).
PRESETS = {
    "vits-usm": MixWeights(0.8, 0.2),
    "vits-usm-star": MixWeights(0.2, 0.6, 0.2),
    "lm-usm": MixWeights(0.95, 0.05),
    "diffusion-usm": MixWeights(0.95, 0.05),
}

#: A frame putting less posterior mass than this on seen entries triggers a warning.
MIN_SEEN_MASS = 0.5


class UnseenEntryWarning(UserWarning):
    """Posterior mass falls mostly on dictionary entries that had zero count."""


def load_preset(name: str) -> MixWeights:
    try:
        return PRESETS[name]
    except KeyError:
        raise UnknownPresetError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


def _normalize(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ShapeError("posterior vector must be 1-D")
    if not np.isfinite(p).all() or (p < 0).any():
        raise DataError("posterior vector must be finite and non-negative")
    s = p.sum()
    if abs(s - 1.0) > POSTERIOR_SUM_TOL:
        raise DataError(f"posterior vector sums to {s!r}, not 1 within {POSTERIOR_SUM_TOL}")
    return p / s


def reexpress(dictionary: SemanticDictionary, p) -> np.ndarray:
    """Return ``sum_k p[k] * entries[k]`` for one posterior vector."""
    p = _normalize(p)
    if p.size != dictionary.K:
        raise ShapeError(f"posterior length {p.size} != dictionary size {dictionary.K}")
    return p @ dictionary.entries.astype(np.float64)


def reexpress_sequence(dictionary: SemanticDictionary, posteriors: PosteriorSequence,
                       utterance_id: Optional[str] = None,
                       backend: Optional[str] = None) -> FeatureSequence:
    """Re-express every frame of ``posteriors``; output frames are float64."""
    if posteriors.num_classes != dictionary.K:
        raise ShapeError(
            f"posterior classes {posteriors.num_classes} != dictionary size {dictionary.K}")
    uid = posteriors.utterance_id if utterance_id is None else utterance_id
    T = posteriors.num_frames
    entries = np.ascontiguousarray(dictionary.entries, dtype=np.float64)
    if T == 0:
        return FeatureSequence(np.zeros((0, dictionary.d)), utterance_id=uid)
    if posteriors.representation == "dense":
        P = posteriors.normalized_dense()
        out = P @ entries
        seen_mass = P[:, ~dictionary.empty].sum(axis=1)
    else:
        indptr, indices, values = posteriors.normalized_csr()
        out = np.zeros((T, dictionary.d))
        _kernels.get("sparse_project", backend)(indptr, indices, values, entries, out)
        seen = values * ~dictionary.empty[indices]
        seen_mass = np.add.reduceat(seen, indptr[:-1]) if seen.size else np.zeros(T)
    low = seen_mass < MIN_SEEN_MASS
    if low.any():
        warnings.warn(
            f"utterance {uid!r}: {int(low.sum())} of {T} frames put under "
            f"{MIN_SEEN_MASS} posterior mass on seen dictionary entries",
            UnseenEntryWarning, stacklevel=2)
    return FeatureSequence(out, utterance_id=uid)


def _check_weights(w: MixWeights, three: bool) -> None:
    if three and w.w3 is None:
        raise InvalidWeightsError("speaker-dependent mix needs w3")
    if not three and w.w3 is not None:
        raise InvalidWeightsError("two-term mix takes no w3; use usm_star_mix")


def usm_mix(x_bar, x, w: MixWeights) -> np.ndarray:
    """``w1 * x_bar + w2 * x``; exact copies at the (1, 0) and (0, 1) endpoints.

    Works framewise on vectors or on ``(T, d)`` stacks alike.
    """
    _check_weights(w, three=False)
    x_bar = np.asarray(x_bar, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x_bar.shape != x.shape:
        raise ShapeError(f"shape mismatch {x_bar.shape} vs {x.shape}")
    if w.w2 == 0.0:
        return x_bar.copy()
    if w.w1 == 0.0:
        return x.copy()
    return w.w1 * x_bar + w.w2 * x


def usm_star_mix(x_bar_universal, x, x_bar_speaker, w: MixWeights) -> np.ndarray:
    _check_weights(w, three=True)
    arrays = [np.asarray(a, dtype=np.float64) for a in (x_bar_universal, x, x_bar_speaker)]
    if len({a.shape for a in arrays}) != 1:
        raise ShapeError(f"shape mismatch {[a.shape for a in arrays]}")
    xu, x, xs = arrays
    if w.w3 == 0.0:
        return usm_mix(xu, x, MixWeights(w.w1, w.w2))
    return w.w1 * xu + w.w2 * x + w.w3 * xs


def transform(features: FeatureSequence, posteriors: PosteriorSequence,
              dictionary: SemanticDictionary, weights: MixWeights,
              speaker_dictionary: Optional[SemanticDictionary] = None) -> FeatureSequence:
    """Full residual block over one utterance."""
    if features.num_frames != posteriors.num_frames:
        raise ShapeError(
            f"{features.num_frames} feature frames vs {posteriors.num_frames} posterior frames")
    if features.dim != dictionary.d:
        raise ShapeError(f"feature dim {features.dim} != dictionary dim {dictionary.d}")
    x_bar = reexpress_sequence(dictionary, posteriors).frames
    if weights.w3 is None:
        if speaker_dictionary is not None:
            raise InvalidWeightsError("a speaker dictionary needs w3")
        out = usm_mix(x_bar, features.frames, weights)
    else:
        if speaker_dictionary is None:
            raise InvalidWeightsError("w3 given without a speaker dictionary")
        if speaker_dictionary.K != dictionary.K or speaker_dictionary.d != dictionary.d:
            raise ShapeError("speaker dictionary shape differs from the universal one")
        if speaker_dictionary.is_universal:
            log.warning("speaker dictionary carries no speaker tag")
        xs = reexpress_sequence(speaker_dictionary, posteriors).frames
        out = usm_star_mix(x_bar, features.frames, xs, weights)
    return FeatureSequence(out, utterance_id=features.utterance_id, speaker_id=features.speaker_id)
