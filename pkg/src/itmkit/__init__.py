"""itmkit: semantics-aware evaluation and adaptive-margin training for
image-text retrieval.

The toolkit scores captions against reference sets with a from-scratch
consensus n-gram metric, derives extended relevance sets and the
normalized cumulative semantic score from the resulting similarity
matrix, and trains toy joint embeddings with an adaptive-margin triplet
loss.
"""

from .corpus import (
    CaptionRecord,
    Corpus,
    CorpusBundle,
    FeatureMatrix,
    load_corpus,
    load_features,
    save_features,
    subsample_corpus,
    synth_corpus,
    write_corpus,
)
from .errors import (
    DivergenceError,
    FileFormatError,
    IntegrityError,
    ItmkitError,
    ProvenanceError,
    UndefinedCorrelationError,
    ValidationError,
)
from .estimators import CiderSimilarity, SamTripletEmbedder
from .losses import (
    SamConfig,
    TripletBatch,
    adaptive_margins,
    fixed_triplet_loss,
    sam_loss,
    sample_negatives,
)
from .metrics import (
    MetricReport,
    RetrievalRun,
    aggregate,
    load_run,
    ncs,
    ncs_non_gt,
    pearson_r,
    recall_ir,
    recall_vse,
    save_run,
    semantic_recall,
)
from .ngrams import DfTable, NgramProfile, build_df, cider_d, load_df, phi, profile, save_df, tokenize
from .semsim import ExtendedGt, SimMatrix, build_sim_matrix, extended_gt, load_sim, save_sim
from .training import (
    EmbeddingModel,
    TrainConfig,
    TrainResult,
    embed,
    evaluate,
    load_model,
    loss_and_grad,
    rank_all,
    save_model,
    train,
)

__version__ = "0.1.0"
