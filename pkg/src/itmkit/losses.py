"""Triplet losses for joint-embedding training: the classic fixed-margin
form and the semantic adaptive-margin form, plus in-batch negative
sampling strategies.

The adaptive margin for a triplet is the caption-similarity gap between
the positive and the negative, scaled by 1/tau: negatives that describe
the anchor almost as well as the positive demand almost no separation,
unrelated negatives demand a wide one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

STRATEGIES = ("RS", "HN", "SN")


@dataclass(frozen=True)
class SamConfig:
    """Hyperparameters of the combined triplet objective."""

    tau: float = 5.0
    fixed_margin: float = 0.2
    sam_weight: float = 5.0
    keep_original_triplet: bool = True
    strategy: str = "SN"
    clamp_negative_margin: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.fixed_margin < 0:
            raise ValidationError(f"fixed margin must be >= 0, got {self.fixed_margin}")
        if self.sam_weight < 0:
            raise ValidationError(f"sam_weight must be >= 0, got {self.sam_weight}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r} (one of {STRATEGIES})")


@dataclass(frozen=True)
class TripletBatch:
    """Per-anchor negatives and caption-similarity values for one batch.

    Anchors are the batch diagonal: pair p is (image p, caption p).
    neg_cap[p] / neg_img[p] index the sampled negative caption / image
    within the batch; phi_* hold the anchor-reference similarity of the
    positive caption, the negative caption, and the negative image's
    caption, all against anchor p's reference set.
    """

    neg_cap: np.ndarray
    neg_img: np.ndarray
    phi_pos: np.ndarray
    phi_neg_cap: np.ndarray
    phi_neg_img: np.ndarray

    def __post_init__(self):
        b = self.neg_cap.shape[0]
        anchors = np.arange(b)
        if (self.neg_cap == anchors).any() or (self.neg_img == anchors).any():
            raise ValidationError("a negative must differ from the anchor's own pair")

    @property
    def size(self) -> int:
        return self.neg_cap.shape[0]


def adaptive_margins(
    phi_pos, phi_neg_cap, phi_neg_img, tau: float, *, clamp: bool = False
):
    """Per-triplet margins: (phi gap to the negative caption, to the negative image) / tau.

    The gap is signed; a negative that out-scores the positive yields a
    negative margin unless clamp floors it at zero.
    """
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    alpha_i2t = (np.asarray(phi_pos, dtype=np.float64) - np.asarray(phi_neg_cap, dtype=np.float64)) / tau
    alpha_t2i = (np.asarray(phi_pos, dtype=np.float64) - np.asarray(phi_neg_img, dtype=np.float64)) / tau
    if clamp:
        alpha_i2t = np.maximum(alpha_i2t, 0.0)
        alpha_t2i = np.maximum(alpha_t2i, 0.0)
    return alpha_i2t, alpha_t2i


def fixed_triplet_loss(sim_pos, sim_neg_cap, sim_neg_img, margin: float):
    """Classic two-hinge triplet loss; broadcasts over per-anchor arrays."""
    sim_pos = np.asarray(sim_pos, dtype=np.float64)
    hinge_cap = np.maximum(margin + np.asarray(sim_neg_cap, dtype=np.float64) - sim_pos, 0.0)
    hinge_img = np.maximum(margin + np.asarray(sim_neg_img, dtype=np.float64) - sim_pos, 0.0)
    return hinge_cap + hinge_img


def sample_negatives(sims: np.ndarray, strategy: str, rng=None):
    """Pick one negative caption and one negative image per anchor.

    sims is the in-batch model-similarity block, sims[p, q] =
    similarity(image p, caption q).  HN takes the closest off-diagonal
    item per row (negative caption) and per column (negative image); SN
    the furthest; RS draws uniformly from the off-diagonal with the
    caller's generator (captions first, then images).  Ties resolve to
    the lowest index.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ValidationError("sims must be a square in-batch block")
    b = sims.shape[0]
    if b < 2:
        raise ValidationError("in-batch sampling needs a batch of at least 2")
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy {strategy!r} (one of {STRATEGIES})")
    idx = np.arange(b)
    if strategy == "RS":
        if rng is None:
            raise ValidationError("random sampling requires a seed or generator")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        neg_cap = rng.integers(0, b - 1, size=b)
        neg_cap += neg_cap >= idx
        neg_img = rng.integers(0, b - 1, size=b)
        neg_img += neg_img >= idx
        return neg_cap.astype(np.int64), neg_img.astype(np.int64)
    masked = sims.copy()
    fill = -np.inf if strategy == "HN" else np.inf
    np.fill_diagonal(masked, fill)
    if strategy == "HN":
        return masked.argmax(axis=1), masked.argmax(axis=0)
    return masked.argmin(axis=1), masked.argmin(axis=0)


def sam_loss(batch: TripletBatch, sims: np.ndarray, cfg: SamConfig) -> float:
    """Batch-mean combined objective.

    The adaptive-margin term uses the batch's sampled negatives; when the
    original triplet is kept it always runs on hardest negatives, which
    complements the adaptive term, and the two combine as
    sam_weight * adaptive + original.
    """
    sims = np.asarray(sims, dtype=np.float64)
    b = batch.size
    if sims.shape != (b, b):
        raise ValidationError("sims must be the batch's square similarity block")
    idx = np.arange(b)
    sim_pos = sims[idx, idx]
    alpha_i2t, alpha_t2i = adaptive_margins(
        batch.phi_pos,
        batch.phi_neg_cap,
        batch.phi_neg_img,
        cfg.tau,
        clamp=cfg.clamp_negative_margin,
    )
    hinge_cap = np.maximum(alpha_i2t + sims[idx, batch.neg_cap] - sim_pos, 0.0)
    hinge_img = np.maximum(alpha_t2i + sims[batch.neg_img, idx] - sim_pos, 0.0)
    total = cfg.sam_weight * float((hinge_cap + hinge_img).mean())
    if cfg.keep_original_triplet:
        hn_cap, hn_img = sample_negatives(sims, "HN")
        per_anchor = fixed_triplet_loss(
            sim_pos, sims[idx, hn_cap], sims[hn_img, idx], cfg.fixed_margin
        )
        total += float(per_anchor.mean())
    return total
