"""Image/caption corpus model: ingestion, synthesis, and feature binding.

A Corpus is a single split of a captioning dataset: an ordered list of
image ids, an ordered list of caption records, and the ground-truth
mapping from each image to its captions.  Indices are dense, 0-based,
and assigned in file order; every downstream matrix keys on them.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass

import numpy as np

from ._binio import expect_magic, read_exact, read_u32, write_u32
from .errors import FileFormatError, IntegrityError, ValidationError

SPLITS = ("train", "val", "test")
FEATURE_MAGIC = b"ITMF"

# synth_corpus generator shape: words per topic pool, captions per image
_POOL_SIZE = 24
_CAPTIONS_PER_IMAGE = 5


@dataclass(frozen=True)
class CaptionRecord:
    """One caption: its text, owning image index, and source identifier."""

    raw_text: str
    image_index: int
    caption_id: object


@dataclass(frozen=True)
class Corpus:
    """Ordered images and captions plus the image -> captions mapping.

    Immutable after construction; safe to share across threads.
    """

    images: tuple[str, ...]
    captions: tuple[CaptionRecord, ...]
    gt: tuple[tuple[int, ...], ...]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r} (expected one of {SPLITS})")
        if len(self.gt) != len(self.images):
            raise IntegrityError(
                f"gt has {len(self.gt)} entries for {len(self.images)} images"
            )
        seen: list[int] = []
        for img_idx, caps in enumerate(self.gt):
            if not caps:
                raise IntegrityError(
                    f"image {self.images[img_idx]!r} has an empty caption list"
                )
            for c in caps:
                if not 0 <= c < len(self.captions):
                    raise IntegrityError(f"gt of image index {img_idx} references caption {c}")
                if self.captions[c].image_index != img_idx:
                    raise IntegrityError(
                        f"caption {self.captions[c].caption_id!r} is listed under image "
                        f"index {img_idx} but records image index "
                        f"{self.captions[c].image_index}"
                    )
            seen.extend(caps)
        if sorted(seen) != list(range(len(self.captions))):
            raise IntegrityError("gt lists do not partition the caption set")
        for rec in self.captions:
            if not rec.raw_text.strip():
                raise IntegrityError(f"caption {rec.caption_id!r} is empty")

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_captions(self) -> int:
        return len(self.captions)

    def image_of(self, caption_index: int) -> int:
        return self.captions[caption_index].image_index


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense per-item feature vectors bound to one side of a corpus."""

    data: np.ndarray  # (rows, dim), float64, row-major
    modality: str  # "image" | "caption"

    def __post_init__(self):
        if self.modality not in ("image", "caption"):
            raise ValidationError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 2:
            raise ValidationError("feature data must be 2-dimensional")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class CorpusBundle:
    """A corpus together with its image and caption feature matrices."""

    corpus: Corpus
    image_features: FeatureMatrix
    caption_features: FeatureMatrix

    def __post_init__(self):
        if self.image_features.modality != "image":
            raise ValidationError("image_features must have modality 'image'")
        if self.caption_features.modality != "caption":
            raise ValidationError("caption_features must have modality 'caption'")
        if self.image_features.rows != self.corpus.n_images:
            raise IntegrityError(
                f"image features have {self.image_features.rows} rows for "
                f"{self.corpus.n_images} images"
            )
        if self.caption_features.rows != self.corpus.n_captions:
            raise IntegrityError(
                f"caption features have {self.caption_features.rows} rows for "
                f"{self.corpus.n_captions} captions"
            )


def load_corpus(path, split: str) -> Corpus:
    """Read a caption JSON file and return the corpus for one split.

    The file holds one object: ``{"images": [{"id": ..., "split": ...,
    "sentences": [{"raw": ..., "sentid": ...}, ...]}, ...]}``.  Images are
    kept in file order; captions keep their order within each image.
    Sentence objects may carry an ``imgid`` field; when present it must
    name the enclosing image.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise FileFormatError(f"{path}: not valid UTF-8 at byte {exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno} "
            f"(byte {exc.pos}): {exc.msg}"
        ) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise FileFormatError(f"{path}: expected a top-level object with an 'images' list")

    images: list[str] = []
    captions: list[CaptionRecord] = []
    gt: list[tuple[int, ...]] = []
    for entry in doc["images"]:
        if not isinstance(entry, dict) or "id" not in entry:
            raise FileFormatError(f"{path}: image entry without an 'id' field")
        if entry.get("split") != split:
            continue
        img_idx = len(images)
        img_id = str(entry["id"])
        images.append(img_id)
        sentences = entry.get("sentences")
        if not isinstance(sentences, list) or not sentences:
            raise IntegrityError(f"image {img_id!r} has no sentences")
        cap_indices = []
        for sent in sentences:
            if not isinstance(sent, dict) or "raw" not in sent:
                raise FileFormatError(f"{path}: sentence without a 'raw' field under image {img_id!r}")
            sentid = sent.get("sentid")
            if "imgid" in sent and str(sent["imgid"]) != img_id:
                raise IntegrityError(
                    f"caption {sentid!r} references image {sent['imgid']!r}, "
                    f"not its enclosing image {img_id!r}"
                )
            text = unicodedata.normalize("NFC", str(sent["raw"]))
            if not text.strip():
                raise IntegrityError(f"caption {sentid!r} of image {img_id!r} is empty")
            cap_indices.append(len(captions))
            captions.append(CaptionRecord(text, img_idx, sentid))
        gt.append(tuple(cap_indices))
    return Corpus(tuple(images), tuple(captions), tuple(gt), split)


def write_corpus(corpus: Corpus, path) -> None:
    """Inverse of load_corpus for the corpus's own split."""
    entries = []
    for img_idx, img_id in enumerate(corpus.images):
        sentences = [
            {"raw": corpus.captions[c].raw_text, "sentid": corpus.captions[c].caption_id}
            for c in corpus.gt[img_idx]
        ]
        entries.append({"id": img_id, "split": corpus.split, "sentences": sentences})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"images": entries}, fh, ensure_ascii=False, indent=1)
        fh.write("\n")


def load_features(path, corpus: Corpus, modality: str) -> FeatureMatrix:
    """Read an ITMF feature file and bind it to one side of the corpus."""
    if modality not in ("image", "caption"):
        raise ValidationError(f"unknown modality {modality!r}")
    expected_rows = corpus.n_images if modality == "image" else corpus.n_captions
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc
    with fh:
        expect_magic(fh, FEATURE_MAGIC, path)
        rows = read_u32(fh, path)
        dim = read_u32(fh, path)
        payload = read_exact(fh, 4 * rows * dim, path)
    if rows != expected_rows:
        raise IntegrityError(
            f"{path}: header says {rows} rows but the corpus has "
            f"{expected_rows} {modality}s"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        r, c = bad[0]
        raise IntegrityError(f"{path}: non-finite value at row {r}, column {c}")
    return FeatureMatrix(data, modality)


def save_features(data: np.ndarray, path) -> None:
    data = np.ascontiguousarray(data, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        write_u32(fh, data.shape[0])
        write_u32(fh, data.shape[1])
        fh.write(data.astype("<f4").tobytes())


def _topic_pool(topic: int) -> list[str]:
    return [f"t{topic}w{i}" for i in range(_POOL_SIZE)]


def synth_corpus(
    seed: int,
    topics: int,
    pairs_per_topic: int,
    dim: int,
    *,
    split: str = "train",
    pair_scale: float = 0.35,
    image_noise: float = 0.45,
    caption_noise: float = 0.6,
) -> tuple[Corpus, FeatureMatrix, FeatureMatrix]:
    """Deterministic synthetic corpus with topic-structured text and features.

    Each topic owns a disjoint word pool; every caption of a topic starts
    with the pool's anchor word, so same-topic captions always share
    vocabulary and cross-topic captions never do.  Image and caption
    features are drawn around a shared topic center plus a per-pair
    latent, so both topic-level and pair-level structure are learnable.
    """
    for name, value in (("topics", topics), ("pairs_per_topic", pairs_per_topic), ("dim", dim)):
        if value < 1:
            raise ValidationError(f"{name} must be >= 1, got {value}")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(topics, dim))

    images: list[str] = []
    captions: list[CaptionRecord] = []
    gt: list[tuple[int, ...]] = []
    img_feats = np.empty((topics * pairs_per_topic, dim))
    cap_feats = np.empty((topics * pairs_per_topic * _CAPTIONS_PER_IMAGE, dim))

    for topic in range(topics):
        pool = _topic_pool(topic)
        for pair in range(pairs_per_topic):
            img_idx = len(images)
            images.append(f"synth-{topic}-{pair}")
            cap_indices = []
            for _ in range(_CAPTIONS_PER_IMAGE):
                n_words = int(rng.integers(6, 11))
                words = [pool[0]] + [pool[int(w)] for w in rng.integers(0, _POOL_SIZE, n_words - 1)]
                cap_indices.append(len(captions))
                captions.append(
                    CaptionRecord(" ".join(words), img_idx, f"synth-{img_idx}-{len(cap_indices) - 1}")
                )
            gt.append(tuple(cap_indices))
            pair_latent = pair_scale * rng.normal(size=dim)
            base = centers[topic] + pair_latent
            img_feats[img_idx] = base + image_noise * rng.normal(size=dim)
            for j, cap_idx in enumerate(cap_indices):
                cap_feats[cap_idx] = base + caption_noise * rng.normal(size=dim)

    corpus = Corpus(tuple(images), tuple(captions), tuple(gt), split)
    return (
        corpus,
        FeatureMatrix(img_feats, "image"),
        FeatureMatrix(cap_feats, "caption"),
    )


def subsample_corpus(
    bundle: CorpusBundle, fraction: float, rng: np.random.Generator
) -> CorpusBundle:
    """Keep a fraction of images (with all their captions), reindexed densely.

    The subsampling unit is the image group, so |G| structure survives.
    """
    if not 0 < fraction <= 1:
        raise ValidationError(f"data fraction must be in (0, 1], got {fraction}")
    corpus = bundle.corpus
    if fraction == 1.0:
        return bundle
    n_keep = max(1, int(round(fraction * corpus.n_images)))
    keep = np.sort(rng.permutation(corpus.n_images)[:n_keep])

    images = tuple(corpus.images[i] for i in keep)
    captions: list[CaptionRecord] = []
    gt: list[tuple[int, ...]] = []
    kept_caption_rows: list[int] = []
    for new_idx, old_idx in enumerate(keep):
        cap_indices = []
        for old_cap in corpus.gt[old_idx]:
            rec = corpus.captions[old_cap]
            cap_indices.append(len(captions))
            captions.append(CaptionRecord(rec.raw_text, new_idx, rec.caption_id))
            kept_caption_rows.append(old_cap)
        gt.append(tuple(cap_indices))
    sub = Corpus(images, tuple(captions), tuple(gt), corpus.split)
    return CorpusBundle(
        sub,
        FeatureMatrix(bundle.image_features.data[keep], "image"),
        FeatureMatrix(bundle.caption_features.data[np.asarray(kept_caption_rows)], "caption"),
    )
