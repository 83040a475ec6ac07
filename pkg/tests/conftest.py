"""Shared fixtures: the bundled toy corpus and small synthetic bundles."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from itmkit import CorpusBundle, build_df, build_sim_matrix, load_corpus, synth_corpus
from itmkit.ngrams import caption_profiles

DATA_DIR = Path(__file__).parent / "data"
TOY_CORPUS = DATA_DIR / "toy_corpus.json"


@pytest.fixture(scope="session")
def toy_path() -> Path:
    return TOY_CORPUS


@pytest.fixture(scope="session")
def toy_corpus():
    return load_corpus(TOY_CORPUS, "test")


@pytest.fixture(scope="session")
def toy_df(toy_corpus):
    return build_df(toy_corpus)


@pytest.fixture(scope="session")
def toy_sim(toy_corpus, toy_df):
    return build_sim_matrix(toy_corpus, toy_df)


@pytest.fixture(scope="session")
def toy_profiles(toy_corpus):
    return caption_profiles(toy_corpus)


@pytest.fixture(scope="session")
def toy_tokens(toy_corpus):
    """Per-image and flat per-caption token lists, sharing the library tokenizer."""
    from itmkit import tokenize

    per_image = [
        [tokenize(toy_corpus.captions[c].raw_text) for c in caps] for caps in toy_corpus.gt
    ]
    flat = [tokenize(rec.raw_text) for rec in toy_corpus.captions]
    return per_image, flat


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def small_bundles() -> tuple[CorpusBundle, CorpusBundle]:
    """Tiny train/val synthetic bundles for trainer tests."""
    c, fi, fc = synth_corpus(5, 3, 12, 16, split="train")
    vc, vfi, vfc = synth_corpus(6, 3, 5, 16, split="val")
    return CorpusBundle(c, fi, fc), CorpusBundle(vc, vfi, vfc)
