"""Scikit-learn style wrappers around the scorer and the trainer.

CiderSimilarity behaves like a vectorizer: fit learns document
frequencies from a corpus, transform scores a corpus's captions against
its images.  SamTripletEmbedder is a fit/transform estimator over
corpus bundles; get_params/set_params make both usable in parameter
sweeps and sklearn tooling.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .corpus import Corpus, CorpusBundle
from .errors import ValidationError
from .losses import SamConfig
from .metrics import DEFAULT_KS, MetricReport
from .ngrams import build_df, caption_profiles, phi
from .semsim import SimMatrix, build_sim_matrix
from .training import TrainConfig, evaluate, train


def _check_corpus(x) -> Corpus:
    if not isinstance(x, Corpus):
        raise ValidationError(f"expected a Corpus, got {type(x).__name__}")
    return x


def _check_bundle(x) -> CorpusBundle:
    if not isinstance(x, CorpusBundle):
        raise ValidationError(f"expected a CorpusBundle, got {type(x).__name__}")
    return x


class CiderSimilarity(BaseEstimator, TransformerMixin):
    """Consensus caption-similarity scorer with a fit/transform surface.

    fit(corpus) builds the document-frequency table; transform(corpus)
    returns the image x caption similarity matrix under those document
    frequencies.  fit_transform on one corpus reproduces the standard
    evaluate-on-the-same-split setup.
    """

    def __init__(self, leave_one_out: bool = False, threads: int | None = None):
        self.leave_one_out = leave_one_out
        self.threads = threads

    def fit(self, X, y=None):
        corpus = _check_corpus(X)
        self.df_table_ = build_df(corpus)
        self.corpus_ = corpus
        return self

    def _check_fitted(self):
        if not hasattr(self, "df_table_"):
            raise NotFittedError("fit the scorer on a corpus first")

    def transform(self, X=None) -> SimMatrix:
        self._check_fitted()
        corpus = self.corpus_ if X is None else _check_corpus(X)
        return build_sim_matrix(corpus, self.df_table_, threads=self.threads)

    def score_pair(self, image_index: int, caption_index: int) -> float:
        """Score one fitted-corpus caption against one image's references."""
        self._check_fitted()
        if not hasattr(self, "_profiles"):
            self._profiles = caption_profiles(self.corpus_)
        return phi(
            self.corpus_,
            self.df_table_,
            image_index,
            caption_index,
            leave_one_out=self.leave_one_out,
            profiles=self._profiles,
        )


class SamTripletEmbedder(BaseEstimator, TransformerMixin):
    """Joint-embedding model trained with the adaptive-margin objective.

    fit(train_bundle, val=val_bundle) runs seeded gradient descent and
    keeps the checkpoint with the best validation Nsum; transform maps
    features into the joint space.
    """

    def __init__(
        self,
        joint_dim: int = 64,
        epochs: int = 15,
        batch_size: int = 128,
        learning_rate: float = 2e-4,
        lr_decay_factor: float = 10.0,
        lr_decay_epoch: int = 15,
        seed: int = 0,
        data_fraction: float = 1.0,
        tau: float = 5.0,
        fixed_margin: float = 0.2,
        sam_weight: float = 5.0,
        keep_original_triplet: bool = True,
        strategy: str = "SN",
        clamp_negative_margin: bool = False,
        eval_ks: tuple[int, ...] = DEFAULT_KS,
        eval_m: int | None = None,
    ):
        self.joint_dim = joint_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_epoch = lr_decay_epoch
        self.seed = seed
        self.data_fraction = data_fraction
        self.tau = tau
        self.fixed_margin = fixed_margin
        self.sam_weight = sam_weight
        self.keep_original_triplet = keep_original_triplet
        self.strategy = strategy
        self.clamp_negative_margin = clamp_negative_margin
        self.eval_ks = eval_ks
        self.eval_m = eval_m

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_epoch=self.lr_decay_epoch,
            seed=self.seed,
            data_fraction=self.data_fraction,
            joint_dim=self.joint_dim,
            sam=SamConfig(
                tau=self.tau,
                fixed_margin=self.fixed_margin,
                sam_weight=self.sam_weight,
                keep_original_triplet=self.keep_original_triplet,
                strategy=self.strategy,
                clamp_negative_margin=self.clamp_negative_margin,
            ),
            eval_ks=tuple(self.eval_ks),
            eval_m=self.eval_m,
        )

    def fit(self, X, y=None, *, val: CorpusBundle):
        result = train(_check_bundle(X), _check_bundle(val), self._train_config())
        self.model_ = result.model
        self.reports_ = result.reports
        self.best_epoch_ = result.best_epoch
        self.best_nsum_ = result.best_nsum
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("fit the embedder first")

    def transform(self, X, modality: str = "image"):
        from .training import embed

        self._check_fitted()
        return embed(self.model_, X, modality)

    def evaluate(
        self,
        bundle: CorpusBundle,
        sim: SimMatrix | None = None,
        *,
        non_gt: bool = False,
    ) -> MetricReport:
        """Score the fitted model on a bundle; builds the bundle's own
        similarity matrix when none is supplied."""
        self._check_fitted()
        bundle = _check_bundle(bundle)
        if sim is None:
            sim = CiderSimilarity().fit_transform(bundle.corpus)
        return evaluate(
            self.model_,
            bundle,
            sim,
            ks=tuple(self.eval_ks),
            m=self.eval_m,
            non_gt=non_gt,
            tag=type(self).__name__,
        )
