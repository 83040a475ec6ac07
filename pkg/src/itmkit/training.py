"""Toy joint-embedding trainer: one linear projection per modality,
L2-normalized outputs, cosine similarity, analytic gradients, and plain
seeded gradient descent.

The model is deliberately small - the point is to exercise the loss and
the evaluation stack, not to compete with deep encoders.  Everything is
deterministic for a fixed seed: shuffles, negative draws, and reduction
order are all pinned.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import expect_magic, read_exact, read_u32, write_u32
from .corpus import CorpusBundle, FeatureMatrix, subsample_corpus, synth_corpus
from .errors import DivergenceError, FileFormatError, ValidationError
from .losses import SamConfig, TripletBatch, adaptive_margins, sample_negatives
from .metrics import DEFAULT_KS, MetricReport, RetrievalRun, aggregate
from .ngrams import build_df
from .semsim import SimMatrix, build_sim_matrix

MODEL_MAGIC = b"ITMW"


@dataclass
class EmbeddingModel:
    """Linear projections into the joint space, one per modality."""

    w_img: np.ndarray  # (d, D_img)
    w_cap: np.ndarray  # (d, D_cap)

    def __post_init__(self):
        if self.w_img.ndim != 2 or self.w_cap.ndim != 2:
            raise ValidationError("projection weights must be 2-dimensional")
        if self.w_img.shape[0] != self.w_cap.shape[0]:
            raise ValidationError("both projections must share the joint dimension")
        if self.w_img.shape[0] < 2:
            raise ValidationError("joint dimension must be >= 2")
        if not (np.isfinite(self.w_img).all() and np.isfinite(self.w_cap).all()):
            raise ValidationError("projection weights must be finite")

    @property
    def d(self) -> int:
        return self.w_img.shape[0]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.w_img.copy(), self.w_cap.copy())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    learning_rate: float = 2e-4
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int = 15
    seed: int = 0
    data_fraction: float = 1.0
    joint_dim: int = 64
    sam: SamConfig = field(default_factory=SamConfig)
    eval_ks: tuple[int, ...] = DEFAULT_KS
    eval_m: int | None = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError(f"batch size must be >= 2, got {self.batch_size}")
        if not 0 < self.data_fraction <= 1:
            raise ValidationError(f"data fraction must be in (0, 1], got {self.data_fraction}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0 or self.lr_decay_factor <= 0:
            raise ValidationError("learning rate and decay factor must be positive")


@dataclass
class TrainResult:
    model: EmbeddingModel  # best checkpoint by validation Nsum
    reports: list[MetricReport]  # index 0 is the untrained model
    best_epoch: int
    best_nsum: float
    epoch_losses: list[float]  # mean batch loss per epoch


def init_model(d: int, d_img: int, d_cap: int, rng: np.random.Generator) -> EmbeddingModel:
    w_img = rng.normal(0.0, 1.0 / np.sqrt(d_img), size=(d, d_img))
    w_cap = rng.normal(0.0, 1.0 / np.sqrt(d_cap), size=(d, d_cap))
    return EmbeddingModel(w_img, w_cap)


def _as_array(features) -> np.ndarray:
    data = features.data if isinstance(features, FeatureMatrix) else np.asarray(features)
    return np.asarray(data, dtype=np.float64)


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit rows plus the pre-normalization norms (0 rows -> first basis vector)."""
    norms = np.linalg.norm(u, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    with np.errstate(invalid="ignore"):  # inf/inf on diverged inputs; caller checks
        e = u / safe[:, np.newaxis]
    zero = norms == 0.0
    if zero.any():
        e[zero] = 0.0
        e[zero, 0] = 1.0
    return e, norms


def embed(model: EmbeddingModel, features, modality: str) -> np.ndarray:
    """Project features and L2-normalize each row.

    Rows whose projection is exactly zero map to the first basis vector;
    that keeps the cosine similarity defined everywhere.
    """
    x = _as_array(features)
    if modality == "image":
        w = model.w_img
    elif modality == "caption":
        w = model.w_cap
    else:
        raise ValidationError(f"unknown modality {modality!r}")
    if x.shape[1] != w.shape[1]:
        raise ValidationError(
            f"feature dimension {x.shape[1]} does not match projection input {w.shape[1]}"
        )
    e, _ = _normalize_rows(x @ w.T)
    return e


def batch_similarities(model: EmbeddingModel, x_img, x_cap) -> np.ndarray:
    return embed(model, x_img, "image") @ embed(model, x_cap, "caption").T


def build_triplet_batch(
    sims: np.ndarray, phi_block: np.ndarray, cfg: SamConfig, rng=None
) -> TripletBatch:
    """Sample negatives with the configured strategy and gather their phi values.

    phi_block[p, q] is the similarity of batch caption q to anchor p's
    reference set; the diagonal holds each anchor's own positive value.
    """
    phi_block = np.asarray(phi_block, dtype=np.float64)
    neg_cap, neg_img = sample_negatives(sims, cfg.strategy, rng)
    idx = np.arange(phi_block.shape[0])
    return TripletBatch(
        neg_cap=neg_cap,
        neg_img=neg_img,
        phi_pos=phi_block[idx, idx],
        phi_neg_cap=phi_block[idx, neg_cap],
        phi_neg_img=phi_block[idx, neg_img],
    )


def loss_and_grad(
    model: EmbeddingModel, x_img, x_cap, triplets: TripletBatch, cfg: SamConfig
) -> tuple[float, np.ndarray, np.ndarray]:
    """Combined loss and its analytic gradients for a batch with fixed negatives.

    Hinges contribute a subgradient of zero when inactive, and the
    inactive branch is taken at an exactly-zero boundary.  Gradients flow
    through the cosine and the row normalization; rows that hit the
    zero-projection fallback get zero gradient.
    """
    x_img = _as_array(x_img)
    x_cap = _as_array(x_cap)
    b = triplets.size
    if x_img.shape[0] != b or x_cap.shape[0] != b:
        raise ValidationError("feature batches must match the triplet batch size")

    u_img = x_img @ model.w_img.T
    u_cap = x_cap @ model.w_cap.T
    e_img, n_img = _normalize_rows(u_img)
    e_cap, n_cap = _normalize_rows(u_cap)
    sims = e_img @ e_cap.T
    idx = np.arange(b)
    sim_pos = sims[idx, idx]

    alpha_i2t, alpha_t2i = adaptive_margins(
        triplets.phi_pos,
        triplets.phi_neg_cap,
        triplets.phi_neg_img,
        cfg.tau,
        clamp=cfg.clamp_negative_margin,
    )
    hinge_cap = alpha_i2t + sims[idx, triplets.neg_cap] - sim_pos
    hinge_img = alpha_t2i + sims[triplets.neg_img, idx] - sim_pos
    act_cap = hinge_cap > 0.0
    act_img = hinge_img > 0.0
    loss = cfg.sam_weight * float(
        (np.where(act_cap, hinge_cap, 0.0) + np.where(act_img, hinge_img, 0.0)).mean()
    )

    d_sims = np.zeros_like(sims)
    w = cfg.sam_weight / b
    np.add.at(d_sims, (idx[act_cap], triplets.neg_cap[act_cap]), w)
    np.add.at(d_sims, (idx[act_cap], idx[act_cap]), -w)
    np.add.at(d_sims, (triplets.neg_img[act_img], idx[act_img]), w)
    np.add.at(d_sims, (idx[act_img], idx[act_img]), -w)

    if cfg.keep_original_triplet:
        hn_cap, hn_img = sample_negatives(sims, "HN")
        t_cap = cfg.fixed_margin + sims[idx, hn_cap] - sim_pos
        t_img = cfg.fixed_margin + sims[hn_img, idx] - sim_pos
        act_tc = t_cap > 0.0
        act_ti = t_img > 0.0
        loss += float((np.where(act_tc, t_cap, 0.0) + np.where(act_ti, t_img, 0.0)).mean())
        np.add.at(d_sims, (idx[act_tc], hn_cap[act_tc]), 1.0 / b)
        np.add.at(d_sims, (idx[act_tc], idx[act_tc]), -1.0 / b)
        np.add.at(d_sims, (hn_img[act_ti], idx[act_ti]), 1.0 / b)
        np.add.at(d_sims, (idx[act_ti], idx[act_ti]), -1.0 / b)

    d_e_img = d_sims @ e_cap
    d_e_cap = d_sims.T @ e_img

    def through_norm(d_e, e, norms):
        inner = (d_e * e).sum(axis=1, keepdims=True)
        d_u = (d_e - inner * e)
        safe = np.where(norms == 0.0, 1.0, norms)
        d_u /= safe[:, np.newaxis]
        d_u[norms == 0.0] = 0.0
        return d_u

    d_u_img = through_norm(d_e_img, e_img, n_img)
    d_u_cap = through_norm(d_e_cap, e_cap, n_cap)
    return loss, d_u_img.T @ x_img, d_u_cap.T @ x_cap


def rank_all(model: EmbeddingModel, bundle: CorpusBundle, tag: str = "") -> tuple[RetrievalRun, RetrievalRun]:
    """Full ranked lists in both directions from model cosine scores."""
    scores = batch_similarities(model, bundle.image_features, bundle.caption_features)
    i2t = np.argsort(-scores, axis=1, kind="stable")
    t2i = np.argsort(-scores.T, axis=1, kind="stable")
    return RetrievalRun("i2t", i2t, tag), RetrievalRun("t2i", t2i, tag)


def evaluate(
    model: EmbeddingModel,
    bundle: CorpusBundle,
    sim: SimMatrix,
    *,
    ks: tuple[int, ...] = DEFAULT_KS,
    m: int | None = None,
    non_gt: bool = False,
    tag: str = "",
) -> MetricReport:
    run_i2t, run_t2i = rank_all(model, bundle, tag)
    return aggregate(run_i2t, run_t2i, bundle.corpus, sim, m=m, ks=ks, non_gt=non_gt, model=tag)


def train(train_bundle: CorpusBundle, val_bundle: CorpusBundle, cfg: TrainConfig) -> TrainResult:
    """Seeded gradient-descent training with per-epoch validation reports.

    Anchor-reference caption similarities are precomputed once over the
    (possibly subsampled) training split and gathered per batch; the
    values are identical to scoring each batch on the fly.  The returned
    model is the per-epoch checkpoint with the best validation Nsum.
    """
    rng = np.random.default_rng(cfg.seed)
    sub = subsample_corpus(train_bundle, cfg.data_fraction, rng)
    corpus = sub.corpus

    train_df = build_df(corpus)
    train_phi = build_sim_matrix(corpus, train_df).values
    val_df = build_df(val_bundle.corpus)
    val_sim = build_sim_matrix(val_bundle.corpus, val_df)

    x_img_all = sub.image_features.data
    x_cap_all = sub.caption_features.data
    cap_img = np.asarray([corpus.image_of(j) for j in range(corpus.n_captions)])

    model = init_model(cfg.joint_dim, x_img_all.shape[1], x_cap_all.shape[1], rng)
    reports = [evaluate(model, val_bundle, val_sim, ks=cfg.eval_ks, m=cfg.eval_m, tag="epoch-0")]
    best_model = model.copy()
    best_nsum = -np.inf
    best_epoch = 0

    n_pairs = corpus.n_captions
    epoch_losses: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.learning_rate / (cfg.lr_decay_factor if epoch > cfg.lr_decay_epoch else 1.0)
        order = rng.permutation(n_pairs)
        batch_losses: list[float] = []
        for batch_no, lo in enumerate(range(0, n_pairs, cfg.batch_size)):
            caps = order[lo : lo + cfg.batch_size]
            if caps.shape[0] < 2:
                continue  # in-batch negatives need at least two pairs
            imgs = cap_img[caps]
            x_img = x_img_all[imgs]
            x_cap = x_cap_all[caps]
            sims = batch_similarities(model, x_img, x_cap)
            # a NaN similarity disables every hinge, so it must be caught
            # here or the loss would silently read 0
            if not np.isfinite(sims).all():
                raise DivergenceError(
                    f"non-finite similarities at epoch {epoch}, batch {batch_no}",
                    epoch=epoch,
                    batch=batch_no,
                )
            phi_block = train_phi[np.ix_(imgs, caps)]
            triplets = build_triplet_batch(sims, phi_block, cfg.sam, rng)
            loss, g_img, g_cap = loss_and_grad(model, x_img, x_cap, triplets, cfg.sam)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}",
                    epoch=epoch,
                    batch=batch_no,
                )
            batch_losses.append(loss)
            model.w_img -= lr * g_img
            model.w_cap -= lr * g_cap
        epoch_losses.append(float(np.mean(batch_losses)))
        report = evaluate(model, val_bundle, val_sim, ks=cfg.eval_ks, m=cfg.eval_m, tag=f"epoch-{epoch}")
        reports.append(report)
        if report.nsum > best_nsum:
            best_nsum = report.nsum
            best_epoch = epoch
            best_model = model.copy()
    return TrainResult(best_model, reports, best_epoch, best_nsum, epoch_losses)


def save_model(model: EmbeddingModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        write_u32(fh, model.d)
        write_u32(fh, model.w_img.shape[1])
        write_u32(fh, model.w_cap.shape[1])
        fh.write(np.ascontiguousarray(model.w_img, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.w_cap, dtype="<f8").tobytes())


def load_model(path) -> EmbeddingModel:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    with fh:
        expect_magic(fh, MODEL_MAGIC, path)
        d = read_u32(fh, path)
        d_img = read_u32(fh, path)
        d_cap = read_u32(fh, path)
        w_img = np.frombuffer(read_exact(fh, 8 * d * d_img, path), dtype="<f8").reshape(d, d_img)
        w_cap = np.frombuffer(read_exact(fh, 8 * d * d_cap, path), dtype="<f8").reshape(d, d_cap)
        trailing = fh.read(1)
    if trailing:
        raise FileFormatError(f"{path}: trailing bytes after weights")
    return EmbeddingModel(w_img.copy(), w_cap.copy())


# --- config files ---------------------------------------------------------

_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "lr_decay_factor": float,
    "lr_decay_epoch": int,
    "seed": int,
    "data_fraction": float,
    "joint_dim": int,
    "eval_ks": "ks",
    "eval_m": int,
}
_SAM_KEYS = {
    "tau": float,
    "fixed_margin": float,
    "sam_weight": float,
    "keep_original_triplet": bool,
    "strategy": str,
    "clamp_negative_margin": bool,
}
_DATA_KEYS = {
    "synth_seed": int,
    "topics": int,
    "pairs_per_topic": int,
    "val_pairs_per_topic": int,
    "dim": int,
    "captions": str,
    "train_split": str,
    "val_split": str,
    "image_features": str,
    "caption_features": str,
    "val_image_features": str,
    "val_caption_features": str,
}


def _coerce(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "ks":
            return tuple(int(p) for p in raw.replace(",", " ").split())
        return kind(raw)
    except ValueError as exc:
        raise ValidationError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _read_section(parser: configparser.ConfigParser, name: str, keys: dict) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in keys:
            raise ValidationError(f"[{name}] has unknown key {key!r}")
        out[key] = _coerce(name, key, raw, keys[key])
    return out


def load_train_config(path) -> tuple[TrainConfig, dict]:
    """Parse a sectioned key/value config into a TrainConfig plus its data section."""
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None
    )
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    except configparser.Error as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    train_kwargs = _read_section(parser, "train", _TRAIN_KEYS)
    sam_kwargs = _read_section(parser, "sam", _SAM_KEYS)
    data = _read_section(parser, "data", _DATA_KEYS)
    cfg = TrainConfig(**train_kwargs, sam=SamConfig(**sam_kwargs))
    return cfg, data


def load_bundles_from_config(data: dict, base_dir) -> tuple[CorpusBundle, CorpusBundle]:
    """Materialize train/val bundles from a config's [data] section.

    Synthetic mode (synth_seed/topics/... keys) derives the validation
    corpus from seed+1; file mode loads a caption file and ITMF feature
    files, with paths resolved against the config's directory.
    """
    base = Path(base_dir)
    if "synth_seed" in data:
        needed = ("topics", "pairs_per_topic", "val_pairs_per_topic", "dim")
        missing = [k for k in needed if k not in data]
        if missing:
            raise ValidationError(f"[data] synthetic mode is missing keys: {missing}")
        c, fi, fc = synth_corpus(
            data["synth_seed"], data["topics"], data["pairs_per_topic"], data["dim"], split="train"
        )
        vc, vfi, vfc = synth_corpus(
            data["synth_seed"] + 1,
            data["topics"],
            data["val_pairs_per_topic"],
            data["dim"],
            split="val",
        )
        return CorpusBundle(c, fi, fc), CorpusBundle(vc, vfi, vfc)
    needed = (
        "captions",
        "train_split",
        "val_split",
        "image_features",
        "caption_features",
        "val_image_features",
        "val_caption_features",
    )
    missing = [k for k in needed if k not in data]
    if missing:
        raise ValidationError(f"[data] file mode is missing keys: {missing}")
    from .corpus import load_corpus, load_features

    train_corpus = load_corpus(base / data["captions"], data["train_split"])
    val_corpus = load_corpus(base / data["captions"], data["val_split"])
    return (
        CorpusBundle(
            train_corpus,
            load_features(base / data["image_features"], train_corpus, "image"),
            load_features(base / data["caption_features"], train_corpus, "caption"),
        ),
        CorpusBundle(
            val_corpus,
            load_features(base / data["val_image_features"], val_corpus, "image"),
            load_features(base / data["val_caption_features"], val_corpus, "caption"),
        ),
    )
