"""Tokenization, n-gram statistics, document frequencies, and the
consensus caption-similarity score.

The scorer is the CIDEr-D recipe built from scratch: tf-idf n-gram
vectors for orders 1..4, a count-clipped cosine against each reference,
a Gaussian length penalty (sigma = 6), uniform order weights, and a x10
scale.  Scores always lie in [0, 10].

Document frequencies count *images*: an n-gram's df is the number of
images whose reference captions contain it at least once.  The idf
numerator is the image count of the corpus the table was built on.
"""

from __future__ import annotations

import io
import math
import re
from collections import Counter
from dataclasses import dataclass

from ._binio import (
    expect_magic,
    read_block_u32,
    read_u32,
    sha256_hex,
    write_block_u32,
    write_u32,
)
from .errors import FileFormatError, ValidationError
from .corpus import Corpus

MAX_ORDER = 4
LENGTH_SIGMA = 6.0
SCORE_SCALE = 10.0

DF_MAGIC = b"ITDF"
TOKENIZER_TAG = "lower-alnum"
SCORER_TAG = "cider-d"

_NON_ALNUM = re.compile(r"[^a-z0-9]+")

Ngram = tuple[str, ...]


def tokenize(raw: str) -> list[str]:
    """Lowercase, replace anything outside [a-z0-9] with spaces, split."""
    return _NON_ALNUM.sub(" ", raw.lower()).split()


@dataclass(frozen=True)
class NgramProfile:
    """Multisets of n-grams for orders 1..4 plus the token count."""

    counts: tuple[dict[Ngram, int], ...]
    length: int


def profile(tokens: list[str]) -> NgramProfile:
    counts = []
    for n in range(1, MAX_ORDER + 1):
        counts.append(dict(Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))))
    return NgramProfile(tuple(counts), len(tokens))


def caption_profiles(corpus: Corpus) -> list[NgramProfile]:
    """Profiles for every caption, in caption order."""
    return [profile(tokenize(rec.raw_text)) for rec in corpus.captions]


@dataclass(frozen=True)
class DfTable:
    """Per-order n-gram document frequencies over a corpus's images."""

    df: tuple[dict[Ngram, int], ...]
    corpus_size: int

    def idf(self, order_index: int, ngram: Ngram) -> float:
        """Natural-log idf; unseen n-grams fall back to df = 1 (max idf)."""
        df = self.df[order_index].get(ngram, 1)
        return math.log(self.corpus_size) - math.log(max(df, 1))

    def to_bytes(self) -> bytes:
        """Canonical serialization; also the persisted ITDF layout."""
        buf = io.BytesIO()
        buf.write(DF_MAGIC)
        write_u32(buf, self.corpus_size)
        for table in self.df:
            write_u32(buf, len(table))
            for ngram in sorted(table):
                write_block_u32(buf, "\x1f".join(ngram).encode("utf-8"))
                write_u32(buf, table[ngram])
        return buf.getvalue()

    def checksum(self) -> str:
        return sha256_hex(self.to_bytes())


def build_df(corpus: Corpus, profiles: list[NgramProfile] | None = None) -> DfTable:
    """Count, per n-gram, the images whose reference set contains it.

    Five occurrences inside one image's captions still count once; df is
    a document (image) frequency, not an occurrence count.
    """
    if corpus.n_images == 0:
        raise ValidationError("cannot build document frequencies over an empty corpus")
    if profiles is None:
        profiles = caption_profiles(corpus)
    df: list[dict[Ngram, int]] = [{} for _ in range(MAX_ORDER)]
    for caps in corpus.gt:
        for order in range(MAX_ORDER):
            seen: set[Ngram] = set()
            for c in caps:
                seen.update(profiles[c].counts[order])
            table = df[order]
            for g in seen:
                table[g] = table.get(g, 0) + 1
    return DfTable(tuple(df), corpus.n_images)


def save_df(table: DfTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(table.to_bytes())


def load_df(path) -> DfTable:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    with fh:
        expect_magic(fh, DF_MAGIC, path)
        corpus_size = read_u32(fh, path)
        df: list[dict[Ngram, int]] = []
        for _ in range(MAX_ORDER):
            count = read_u32(fh, path)
            table: dict[Ngram, int] = {}
            for _ in range(count):
                key = read_block_u32(fh, path).decode("utf-8")
                table[tuple(key.split("\x1f"))] = read_u32(fh, path)
            df.append(table)
        trailing = fh.read(1)
    if trailing:
        raise FileFormatError(f"{path}: trailing bytes after document-frequency payload")
    return DfTable(tuple(df), corpus_size)


def _tfidf(prof: NgramProfile, df: DfTable) -> tuple[list[dict[Ngram, float]], list[float]]:
    """Per-order tf-idf vectors and their L2 norms."""
    vecs: list[dict[Ngram, float]] = []
    norms: list[float] = []
    for order in range(MAX_ORDER):
        vec = {g: c * df.idf(order, g) for g, c in prof.counts[order].items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d(candidate: NgramProfile, refs: list[NgramProfile], df: DfTable) -> float:
    """Consensus similarity of a candidate caption to a reference set.

    Per order and reference: clip the candidate's tf-idf entries at the
    reference's, take the dot product with the reference, normalize by
    both L2 norms (0 when either norm vanishes), and damp by
    exp(-(len_c - len_r)^2 / (2 sigma^2)).  Average the four orders,
    average over references, scale by 10.
    """
    if not refs:
        raise ValidationError("reference set must be non-empty")
    cand_vecs, cand_norms = _tfidf(candidate, df)
    inv_two_sigma_sq = 1.0 / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)
    total = 0.0
    for ref in refs:
        ref_vecs, ref_norms = _tfidf(ref, df)
        delta = float(candidate.length - ref.length)
        penalty = math.exp(-delta * delta * inv_two_sigma_sq)
        acc = 0.0
        for order in range(MAX_ORDER):
            if cand_norms[order] > 0.0 and ref_norms[order] > 0.0:
                cvec = cand_vecs[order]
                num = 0.0
                for g, rv in ref_vecs[order].items():
                    cv = cvec.get(g)
                    if cv is not None:
                        num += min(cv, rv) * rv
                acc += num / (cand_norms[order] * ref_norms[order]) * penalty
        total += acc / MAX_ORDER
    return SCORE_SCALE * total / len(refs)


def phi(
    corpus: Corpus,
    df: DfTable,
    image_index: int,
    caption_index: int,
    *,
    leave_one_out: bool = False,
    profiles: list[NgramProfile] | None = None,
) -> float:
    """Score caption `caption_index` against image `image_index`'s references.

    A caption that belongs to the image's ground truth stays inside the
    reference set; with leave_one_out it is dropped first (an image whose
    only reference is the candidate then scores 0).
    """
    if not 0 <= image_index < corpus.n_images:
        raise ValidationError(f"image index {image_index} out of range")
    if not 0 <= caption_index < corpus.n_captions:
        raise ValidationError(f"caption index {caption_index} out of range")
    if profiles is None:
        profiles = caption_profiles(corpus)
    ref_indices = list(corpus.gt[image_index])
    if leave_one_out and caption_index in ref_indices:
        ref_indices.remove(caption_index)
        if not ref_indices:
            return 0.0
    return cider_d(profiles[caption_index], [profiles[r] for r in ref_indices], df)
