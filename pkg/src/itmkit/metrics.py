"""Retrieval metrics: both recall formulations, semantic recall, the
normalized cumulative semantic score, report aggregation, and
correlation with human judgments.

Conventions: per-query values lie in [0, 1]; report sums (Rsum, Nsum)
are sums of six percent-scaled cells, direction x k in {1, 5, 10}.
Image queries have |G| references; caption queries have exactly one
relevant image, their paired one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._binio import expect_magic, read_exact, read_u32, read_u8, write_u32, write_u8
from .corpus import Corpus
from .errors import (
    FileFormatError,
    IntegrityError,
    UndefinedCorrelationError,
    ValidationError,
)
from .semsim import ExtendedGt, SimMatrix, extended_gt

RUN_MAGIC = b"ITRR"
DIRECTIONS = ("i2t", "t2i")
DEFAULT_KS = (1, 5, 10)
METRIC_KEYS = ("rv", "r", "sr", "ncs")


@dataclass(frozen=True)
class RetrievalRun:
    """Full ranked item lists for every query in one direction."""

    direction: str
    rankings: np.ndarray  # (n_queries, n_items) integer
    model: str = ""

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"unknown direction {self.direction!r}")
        if self.rankings.ndim != 2:
            raise ValidationError("rankings must be 2-dimensional")

    @property
    def n_queries(self) -> int:
        return self.rankings.shape[0]

    @property
    def n_items(self) -> int:
        return self.rankings.shape[1]

    def validate_permutations(self) -> None:
        """Check that every ranked list permutes 0..n_items-1."""
        expect = np.arange(self.n_items)
        sorted_rows = np.sort(self.rankings, axis=1)
        bad = np.nonzero((sorted_rows != expect[np.newaxis, :]).any(axis=1))[0]
        if bad.size:
            raise IntegrityError(
                f"query {bad[0]} of the {self.direction} run is not a permutation "
                f"of 0..{self.n_items - 1}"
            )


def gt_items(corpus: Corpus, direction: str, query: int) -> tuple[int, ...]:
    """Ground-truth items for a query: G_i for images, the paired image for captions."""
    if direction == "i2t":
        return corpus.gt[query]
    return (corpus.image_of(query),)


def _check_run(run: RetrievalRun, corpus: Corpus) -> None:
    n_q = corpus.n_images if run.direction == "i2t" else corpus.n_captions
    n_i = corpus.n_captions if run.direction == "i2t" else corpus.n_images
    if run.n_queries != n_q or run.n_items != n_i:
        raise IntegrityError(
            f"{run.direction} run is {run.n_queries}x{run.n_items}, corpus wants {n_q}x{n_i}"
        )


def recall_vse(run: RetrievalRun, corpus: Corpus, k: int) -> tuple[np.ndarray, float]:
    """Binary retrieval recall: 1 when any ground-truth item is in the top-k."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    _check_run(run, corpus)
    per_query = np.empty(run.n_queries)
    for q in range(run.n_queries):
        top = run.rankings[q, :k]
        gts = gt_items(corpus, run.direction, q)
        per_query[q] = 1.0 if np.isin(top, gts).any() else 0.0
    return per_query, float(per_query.mean())


def recall_ir(run: RetrievalRun, corpus: Corpus, k: int) -> tuple[np.ndarray, float]:
    """Information-retrieval recall: fraction of ground-truth items in the top-k."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    _check_run(run, corpus)
    per_query = np.empty(run.n_queries)
    for q in range(run.n_queries):
        top = run.rankings[q, :k]
        gts = gt_items(corpus, run.direction, q)
        per_query[q] = np.isin(top, gts).sum() / len(gts)
    return per_query, float(per_query.mean())


def semantic_recall(
    run: RetrievalRun, ext: list[ExtendedGt], k: int
) -> tuple[np.ndarray, float]:
    """Recall against the extended (top-m by similarity) relevant sets."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(ext) != run.n_queries:
        raise ValidationError("one extended set per query is required")
    per_query = np.empty(run.n_queries)
    for q in range(run.n_queries):
        top = run.rankings[q, :k]
        items = ext[q].indices
        per_query[q] = np.isin(top, items).sum() / len(items)
    return per_query, float(per_query.mean())


def ncs(
    run: RetrievalRun, sim: SimMatrix, ext: list[ExtendedGt], k: int
) -> tuple[np.ndarray, float]:
    """Retrieved similarity mass over the extended set's total mass at cut-off k.

    Queries whose extended set carries no positive mass score 0 and stay
    in the mean.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(ext) != run.n_queries:
        raise ValidationError("one extended set per query is required")
    per_query = np.empty(run.n_queries)
    for q in range(run.n_queries):
        top = set(int(i) for i in run.rankings[q, :k])
        num = 0.0
        den = 0.0
        for idx, val in zip(ext[q].indices, ext[q].values):
            den += val
            if idx in top:
                num += val
        per_query[q] = num / den if den > 0.0 else 0.0
    return per_query, float(per_query.mean())


def build_extended_sets(
    run: RetrievalRun, sim: SimMatrix, m: int
) -> list[ExtendedGt]:
    kind = "image" if run.direction == "i2t" else "caption"
    return [extended_gt(sim, kind, q, m) for q in range(run.n_queries)]


def ncs_non_gt(
    run: RetrievalRun, sim: SimMatrix, corpus: Corpus, m: int, k: int
) -> tuple[np.ndarray, float]:
    """NCS after deleting ground-truth items from both ranking and candidates.

    The ranked list closes the gaps left by removed items, so a top-k
    that was all ground truth is scored on the items that follow.
    """
    if k < 1 or m < 1:
        raise ValidationError("k and m must be >= 1")
    _check_run(run, corpus)
    kind = "image" if run.direction == "i2t" else "caption"
    per_query = np.empty(run.n_queries)
    for q in range(run.n_queries):
        gts = set(gt_items(corpus, run.direction, q))
        ranking = run.rankings[q]
        kept = ranking[~np.isin(ranking, list(gts))]
        top = set(int(i) for i in kept[:k])

        vals = sim.values[q, :] if kind == "image" else sim.values[:, q]
        candidates = np.setdiff1d(np.arange(vals.shape[0]), list(gts))
        take = min(m, candidates.size)
        if take == 0:
            per_query[q] = 0.0
            continue
        sub = vals[candidates]
        order = np.lexsort((candidates, -sub))
        chosen = candidates[order[:take]]
        den = float(vals[chosen].sum())
        num = float(sum(vals[i] for i in chosen if int(i) in top))
        per_query[q] = num / den if den > 0.0 else 0.0
    return per_query, float(per_query.mean())


@dataclass(frozen=True)
class MetricReport:
    """Per-direction metric means plus the paper-style summary sums.

    cells[direction][metric][k] holds the mean over queries in [0, 1];
    metric keys are rv (binary recall), r (IR recall), sr (semantic
    recall), ncs.  Sums are percent-scaled over the six (direction, k)
    cells.  The similarity scorer is echoed so reports based on the
    n-gram scorer are never mistaken for scene-graph-based numbers.
    """

    cells: dict
    rsum: float
    nsum: float
    nsum_non_gt: float
    ks: tuple[int, ...]
    m: int | None
    scorer: str
    gt_removed: bool
    model: str = ""

    def to_json(self) -> str:
        doc = {
            "cells": self.cells,
            "rsum": self.rsum,
            "nsum": self.nsum,
            "nsum_non_gt": self.nsum_non_gt,
            "config": {
                "ks": list(self.ks),
                "m": self.m if self.m is not None else "k",
                "scorer": self.scorer,
                "gt_removed": self.gt_removed,
                "model": self.model,
            },
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def to_table(self) -> str:
        m_label = str(self.m) if self.m is not None else "k (per-cell default)"
        ncs_label = "NCS(non-GT)" if self.gt_removed else "NCS"
        lines = [
            f"# model: {self.model or '-'}   scorer: {self.scorer}   "
            f"m: {m_label}   gt_removed: {str(self.gt_removed).lower()}",
            f"{'direction':<10}{'metric':<13}" + "".join(f"@{k:<8}" for k in self.ks),
        ]
        names = {"rv": "R^V", "r": "R", "sr": "SR", "ncs": ncs_label}
        for direction in DIRECTIONS:
            for metric in METRIC_KEYS:
                row = self.cells[direction][metric]
                cells = "".join(f"{100 * row[str(k)]:<9.1f}" for k in self.ks)
                lines.append(f"{direction:<10}{names[metric]:<13}{cells}")
        lines.append(
            f"Rsum {self.rsum:.1f}   Nsum {self.nsum:.1f}   Nsum(N) {self.nsum_non_gt:.1f}"
        )
        return "\n".join(lines)


def aggregate(
    run_i2t: RetrievalRun,
    run_t2i: RetrievalRun,
    corpus: Corpus,
    sim: SimMatrix,
    *,
    m: int | None = None,
    ks: tuple[int, ...] = DEFAULT_KS,
    non_gt: bool = False,
    model: str = "",
) -> MetricReport:
    """Compute every metric cell plus Rsum / Nsum / Nsum(N).

    With m unset, each cut-off k uses m = k for the extended sets (the
    ideal-top-k normalization); an explicit m applies to every cell.
    With non_gt, the NCS cells switch to the ground-truth-removed
    variant (the sums always report both).  The sums accumulate only the
    standard cut-offs 1/5/10, whatever ks is.
    """
    if run_i2t.direction != "i2t" or run_t2i.direction != "t2i":
        raise ValidationError("aggregate needs one i2t run and one t2i run")
    _check_run(run_i2t, corpus)
    _check_run(run_t2i, corpus)
    if sim.n_images != corpus.n_images or sim.n_captions != corpus.n_captions:
        raise IntegrityError("similarity matrix does not match the corpus")

    cells: dict = {d: {metric: {} for metric in METRIC_KEYS} for d in DIRECTIONS}
    rsum = 0.0
    nsum = 0.0
    nsum_non_gt = 0.0
    for direction, run in (("i2t", run_i2t), ("t2i", run_t2i)):
        for k in ks:
            m_eff = m if m is not None else k
            ext = build_extended_sets(run, sim, m_eff)
            _, rv = recall_vse(run, corpus, k)
            _, r = recall_ir(run, corpus, k)
            _, sr = semantic_recall(run, ext, k)
            _, plain = ncs(run, sim, ext, k)
            _, removed = ncs_non_gt(run, sim, corpus, m_eff, k)
            cells[direction]["rv"][str(k)] = rv
            cells[direction]["r"][str(k)] = r
            cells[direction]["sr"][str(k)] = sr
            cells[direction]["ncs"][str(k)] = removed if non_gt else plain
            if k in (1, 5, 10):
                rsum += 100.0 * rv
                nsum += 100.0 * plain
                nsum_non_gt += 100.0 * removed
    return MetricReport(
        cells=cells,
        rsum=rsum,
        nsum=nsum,
        nsum_non_gt=nsum_non_gt,
        ks=tuple(ks),
        m=m,
        scorer=sim.meta.scorer,
        gt_removed=non_gt,
        model=model,
    )


def pearson_r(x, y) -> float:
    """Product-moment correlation coefficient of two equal-length samples."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValidationError("inputs must be 1-dimensional and the same length")
    if x.size < 2:
        raise ValidationError("correlation needs at least two points")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValidationError("inputs must be finite")
    dx = x - x.mean()
    dy = y - y.mean()
    denom = np.sqrt((dx * dx).sum()) * np.sqrt((dy * dy).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("zero variance in at least one input")
    r = float((dx * dy).sum() / denom)
    return min(1.0, max(-1.0, r))


def save_run(run: RetrievalRun, path) -> None:
    with open(path, "wb") as fh:
        fh.write(RUN_MAGIC)
        write_u8(fh, DIRECTIONS.index(run.direction))
        write_u32(fh, run.n_queries)
        write_u32(fh, run.n_items)
        fh.write(np.ascontiguousarray(run.rankings, dtype="<u4").tobytes())


def load_run(run_path, *, model: str = "") -> RetrievalRun:
    try:
        fh = open(run_path, "rb")
    except OSError as exc:
        raise FileFormatError(f"{run_path}: {exc}") from exc
    with fh:
        expect_magic(fh, RUN_MAGIC, run_path)
        direction_byte = read_u8(fh, run_path)
        if direction_byte >= len(DIRECTIONS):
            raise FileFormatError(f"{run_path}: unknown direction byte {direction_byte}")
        n_queries = read_u32(fh, run_path)
        n_items = read_u32(fh, run_path)
        payload = read_exact(fh, 4 * n_queries * n_items, run_path)
        trailing = fh.read(1)
    if trailing:
        raise FileFormatError(f"{run_path}: trailing bytes after rankings")
    rankings = (
        np.frombuffer(payload, dtype="<u4").reshape(n_queries, n_items).astype(np.int64)
    )
    run = RetrievalRun(DIRECTIONS[direction_byte], rankings, model)
    run.validate_permutations()
    return run


def read_score_tsv(path) -> dict[tuple[str, str], float]:
    """Read a UTF-8 TSV with header columns image_id, caption_id, score."""
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    with fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:3] != ["image_id", "caption_id", "score"]:
            raise FileFormatError(
                f"{path}: expected header 'image_id<TAB>caption_id<TAB>score', got {header!r}"
            )
        scores: dict[tuple[str, str], float] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise FileFormatError(f"{path}: line {lineno}: expected 3 columns")
            try:
                scores[(parts[0], parts[1])] = float(parts[2])
            except ValueError as exc:
                raise FileFormatError(f"{path}: line {lineno}: bad score {parts[2]!r}") from exc
    return scores


def correlate_judgments(
    judgments: dict[tuple[str, str], float], scores: dict[tuple[str, str], float]
) -> tuple[float, int]:
    """Pearson-R between human judgments and scores over their shared pairs."""
    keys = sorted(judgments.keys() & scores.keys())
    if len(keys) < 2:
        raise ValidationError(
            f"only {len(keys)} (image_id, caption_id) pairs are shared; need at least 2"
        )
    x = [judgments[k] for k in keys]
    y = [scores[k] for k in keys]
    return pearson_r(x, y), len(keys)
