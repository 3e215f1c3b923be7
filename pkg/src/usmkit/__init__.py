"""Universal semantic dictionaries, content re-expression and speech-unit tools."""

from .errors import (
    DataError,
    EmptyCorpusError,
    FormatError,
    InsufficientDataError,
    InvalidDimensionError,
    InvalidEmbeddingError,
    InvalidParameterError,
    InvalidWeightsError,
    ShapeError,
    UndefinedCorrelationError,
    UnknownPresetError,
    USMError,
)
from .model import (
    Codebook,
    FeatureSequence,
    MixWeights,
    PosteriorSequence,
    SemanticDictionary,
    StatsAccumulator,
)
from .stats import accumulate, accumulate_corpus, build_dictionary, finalize, merge, new_accumulator
from .cfr import load_preset, reexpress, reexpress_sequence, transform, usm_mix, usm_star_mix
from .units import assign, inertia, kmeans_train, soft_posteriors
from .metrics import F0Contour, cosine_ssim, f0_ground_truth, fpc

__version__ = "0.1.0"
