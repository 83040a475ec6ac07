"""Dense image x caption similarity matrix and extended ground-truth sets.

The matrix holds, for every (image, caption) pair, the consensus score of
the caption against the image's reference captions.  Construction is
vectorized with per-order sparse tf-idf matrices and runs over fixed-size
candidate blocks, so the result is bit-identical no matter how many
worker threads execute the blocks.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._binio import expect_magic, read_block_u32, read_exact, read_u32, write_block_u32, write_u32
from .corpus import Corpus
from .errors import FileFormatError, IntegrityError, ProvenanceError, ValidationError
from .ngrams import (
    LENGTH_SIGMA,
    MAX_ORDER,
    SCORE_SCALE,
    SCORER_TAG,
    TOKENIZER_TAG,
    DfTable,
    NgramProfile,
    caption_profiles,
)

SIM_MAGIC = b"ITSM"

# Candidate block width. Each output cell is computed entirely inside one
# block, so the value is a pure tuning knob - but it must never depend on
# the worker count or outputs could differ across --threads settings.
_BLOCK = 256


@dataclass(frozen=True)
class SimMeta:
    scorer: str
    tokenizer: str
    df_checksum: str

    def to_json(self) -> str:
        return json.dumps(
            {"scorer": self.scorer, "tokenizer": self.tokenizer, "df_checksum": self.df_checksum},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, raw: str) -> "SimMeta":
        doc = json.loads(raw)
        return cls(doc["scorer"], doc["tokenizer"], doc["df_checksum"])


@dataclass(frozen=True)
class SimMatrix:
    """Row-major (n_images, n_captions) matrix of non-negative scores."""

    values: np.ndarray
    meta: SimMeta

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValidationError("similarity values must be 2-dimensional")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise IntegrityError("similarity values must be finite and non-negative")

    @property
    def n_images(self) -> int:
        return self.values.shape[0]

    @property
    def n_captions(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ExtendedGt:
    """Top-m most similar opposite-modality items for one query."""

    kind: str  # "image" | "caption"
    query: int
    indices: tuple[int, ...]
    values: tuple[float, ...]


class _OrderData:
    """Sparse per-order machinery shared by all candidate blocks."""

    def __init__(self, profiles: list[NgramProfile], order: int, df: DfTable):
        n_cap = len(profiles)
        vocab: dict = {}
        rows: list[int] = []
        cols: list[int] = []
        cnts: list[int] = []
        for j, prof in enumerate(profiles):
            for g, c in prof.counts[order].items():
                col = vocab.setdefault(g, len(vocab))
                rows.append(j)
                cols.append(col)
                cnts.append(c)
        self.empty = not vocab
        if self.empty:
            self.norms = np.zeros(n_cap)
            return
        idf = np.empty(len(vocab))
        for g, col in vocab.items():
            idf[col] = df.idf(order, g)
        row_arr = np.asarray(rows, dtype=np.int64)
        col_arr = np.asarray(cols, dtype=np.int64)
        cnt_arr = np.asarray(cnts, dtype=np.float64)
        shape = (n_cap, len(vocab))
        tfidf = sp.csr_matrix((cnt_arr * idf[col_arr], (row_arr, col_arr)), shape=shape)
        self.norms = np.sqrt(np.asarray(tfidf.power(2).sum(axis=1)).ravel())
        # Count clipping via level decomposition: min(a, b) = sum_t 1[a>=t]*1[b>=t].
        # Level t candidate matrix carries idf, reference matrix carries count*idf.
        self.cand_levels: list[sp.csr_matrix] = []
        self.ref_levels: list[sp.csr_matrix] = []
        max_count = int(cnt_arr.max())
        for t in range(1, max_count + 1):
            mask = cnt_arr >= t
            r, c, n = row_arr[mask], col_arr[mask], cnt_arr[mask]
            self.cand_levels.append(sp.csr_matrix((idf[c], (r, c)), shape=shape))
            self.ref_levels.append(sp.csr_matrix((n * idf[c], (r, c)), shape=shape).T.tocsr())


def build_sim_matrix(
    corpus: Corpus,
    df: DfTable,
    *,
    threads: int | None = None,
    profiles: list[NgramProfile] | None = None,
) -> SimMatrix:
    """Score every caption against every image's reference set.

    Equivalent to calling the scalar scorer on each (image, caption)
    pair; candidate blocks are independent, so scheduling cannot change
    the output bytes.
    """
    if profiles is None:
        profiles = caption_profiles(corpus)
    n_img, n_cap = corpus.n_images, corpus.n_captions
    lengths = np.asarray([p.length for p in profiles], dtype=np.float64)
    orders = [_OrderData(profiles, order, df) for order in range(MAX_ORDER)]

    # caption -> image aggregation (sums each image's references)
    ref_rows = np.arange(n_cap, dtype=np.int64)
    ref_imgs = np.asarray([corpus.captions[j].image_index for j in range(n_cap)], dtype=np.int64)
    agg = sp.csr_matrix((np.ones(n_cap), (ref_rows, ref_imgs)), shape=(n_cap, n_img))
    scale = SCORE_SCALE / (MAX_ORDER * np.asarray([len(g) for g in corpus.gt], dtype=np.float64))

    inv_two_sigma_sq = 1.0 / (2.0 * LENGTH_SIGMA * LENGTH_SIGMA)
    out = np.empty((n_img, n_cap), dtype=np.float64)

    def run_block(lo: int) -> None:
        hi = min(lo + _BLOCK, n_cap)
        block = np.zeros((hi - lo, n_img))
        for od in orders:
            if od.empty:
                continue
            mindot: sp.csr_matrix | None = None
            for cand, ref in zip(od.cand_levels, od.ref_levels):
                part = cand[lo:hi] @ ref
                mindot = part if mindot is None else mindot + part
            coo = mindot.tocoo()
            r, c, d = coo.row, coo.col, coo.data
            cn = od.norms[lo + r]
            rn = od.norms[c]
            ok = (cn > 0.0) & (rn > 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                d = np.where(ok, d / (cn * rn), 0.0)
            delta = lengths[lo + r] - lengths[c]
            d = d * np.exp(-delta * delta * inv_two_sigma_sq)
            val = sp.csr_matrix((d, (r, c)), shape=(hi - lo, n_cap))
            block += (val @ agg).toarray()
        block *= scale[np.newaxis, :]
        out[:, lo:hi] = block.T

    starts = range(0, n_cap, _BLOCK)
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, starts))
    else:
        for lo in starts:
            run_block(lo)

    meta = SimMeta(SCORER_TAG, TOKENIZER_TAG, df.checksum())
    return SimMatrix(out, meta)


def extended_gt(
    sim: SimMatrix,
    kind: str,
    query: int,
    m: int,
    *,
    force_include: tuple[int, ...] = (),
) -> ExtendedGt:
    """Top-m opposite-modality items for a query, by similarity.

    Image queries rank captions along the query's row; caption queries
    rank images along the column.  Ties break toward the lower index.
    force_include pins the given items into the selection before the
    remaining slots are filled (used for ablations); the result is always
    re-sorted so values stay non-increasing.
    """
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if kind == "image":
        vals = sim.values[query, :]
    elif kind == "caption":
        vals = sim.values[:, query]
    else:
        raise ValidationError(f"unknown query kind {kind!r}")
    n = vals.shape[0]
    take = min(m, n)
    order = np.lexsort((np.arange(n), -vals))
    if force_include:
        pinned = set(force_include)
        forced = [i for i in order if i in pinned]
        rest = [i for i in order if i not in pinned]
        chosen = (forced + rest)[:take]
        chosen.sort(key=lambda i: (-vals[i], i))
        picked = np.asarray(chosen)
    else:
        picked = order[:take]
    return ExtendedGt(kind, query, tuple(int(i) for i in picked), tuple(float(vals[i]) for i in picked))


def save_sim(sim: SimMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(SIM_MAGIC)
        write_u32(fh, sim.n_images)
        write_u32(fh, sim.n_captions)
        write_block_u32(fh, sim.meta.to_json().encode("utf-8"))
        fh.write(sim.values.astype("<f4").tobytes())


def load_sim(path, *, expected_df_checksum: str | None = None) -> SimMatrix:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    with fh:
        expect_magic(fh, SIM_MAGIC, path)
        n_img = read_u32(fh, path)
        n_cap = read_u32(fh, path)
        meta = SimMeta.from_json(read_block_u32(fh, path).decode("utf-8"))
        payload = read_exact(fh, 4 * n_img * n_cap, path)
        trailing = fh.read(1)
    if trailing:
        raise FileFormatError(f"{path}: trailing bytes after similarity payload")
    if expected_df_checksum is not None and meta.df_checksum != expected_df_checksum:
        raise ProvenanceError(
            f"{path}: similarity matrix was built against document frequencies "
            f"{meta.df_checksum[:12]}..., expected {expected_df_checksum[:12]}..."
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(n_img, n_cap).astype(np.float64)
    return SimMatrix(values, meta)
