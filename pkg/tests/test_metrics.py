"""Recall variants, semantic recall, NCS, aggregation, and Pearson-R."""

import numpy as np
import pytest

from itmkit import (
    IntegrityError,
    RetrievalRun,
    UndefinedCorrelationError,
    ValidationError,
    aggregate,
    build_df,
    build_sim_matrix,
    load_run,
    ncs,
    ncs_non_gt,
    pearson_r,
    recall_ir,
    recall_vse,
    save_run,
    semantic_recall,
)
from itmkit.metrics import build_extended_sets, correlate_judgments, read_score_tsv
from itmkit.semsim import ExtendedGt, SimMatrix, SimMeta

from oracles import naive_ncs_query, naive_pearson
from test_ngrams import corpus_from_tokens


def single_query_run(direction, ranking, n_items):
    row = np.asarray(ranking)
    rest = np.setdiff1d(np.arange(n_items), row)
    return RetrievalRun(direction, np.concatenate([row, rest])[np.newaxis, :])


def random_runs(corpus, rng):
    i2t = np.vstack([rng.permutation(corpus.n_captions) for _ in range(corpus.n_images)])
    t2i = np.vstack([rng.permutation(corpus.n_images) for _ in range(corpus.n_captions)])
    return RetrievalRun("i2t", i2t), RetrievalRun("t2i", t2i)


def perfect_runs(corpus):
    """Rank every query's ground-truth items first."""
    i2t = []
    for caps in corpus.gt:
        rest = np.setdiff1d(np.arange(corpus.n_captions), list(caps))
        i2t.append(np.concatenate([np.asarray(caps), rest]))
    t2i = []
    for j in range(corpus.n_captions):
        img = corpus.image_of(j)
        rest = np.setdiff1d(np.arange(corpus.n_images), [img])
        t2i.append(np.concatenate([[img], rest]))
    return RetrievalRun("i2t", np.vstack(i2t)), RetrievalRun("t2i", np.vstack(t2i))


@pytest.fixture(scope="module")
def tiny_corpus():
    # three images, two captions each, partially shared vocabulary
    sets = [
        [["a", "dog", "runs", "far"], ["a", "dog", "sits", "down"]],
        [["a", "cat", "runs", "far"], ["the", "cat", "naps", "now"]],
        [["red", "bus", "stops", "here"], ["red", "bus", "turns", "left"]],
    ]
    return corpus_from_tokens(sets)


@pytest.fixture(scope="module")
def tiny_sim(tiny_corpus):
    return build_sim_matrix(tiny_corpus, build_df(tiny_corpus))


class TestRecallVse:
    def test_indicator_examples(self):
        corpus = corpus_from_tokens([[["w"]] for _ in range(10)])
        hit = single_query_run("t2i", [9, 3, 1, 2, 7], 10)
        miss = single_query_run("t2i", [9, 8, 1, 2, 7], 10)
        # query caption 3 pairs with image 3
        per_hit, _ = recall_vse(_repeat_row(hit, corpus.n_captions), corpus, 5)
        per_miss, _ = recall_vse(_repeat_row(miss, corpus.n_captions), corpus, 5)
        assert per_hit[3] == 1.0
        assert per_miss[3] == 0.0

    def test_i2t_partial_hits_still_one(self, tiny_corpus):
        # 1 of image 0's 2 captions inside top-5
        ranking = [0, 2, 3, 4, 5, 1]
        run = RetrievalRun("i2t", np.vstack([ranking] * 3))
        per, _ = recall_vse(run, tiny_corpus, 5)
        assert per[0] == 1.0


def _repeat_row(run, n_queries):
    return RetrievalRun(run.direction, np.vstack([run.rankings[0]] * n_queries))


class TestRecallIr:
    def test_fraction(self, tiny_corpus):
        # top-2 holds exactly one of image 0's two captions
        run = RetrievalRun("i2t", np.vstack([[0, 2, 1, 3, 4, 5]] * 3))
        per, _ = recall_ir(run, tiny_corpus, 2)
        assert per[0] == 0.5

    def test_five_references(self):
        corpus = corpus_from_tokens(
            [[["a", "b"]] * 5, [["c", "d"]] * 5]
        )
        ranking = [0, 1, 5, 6, 7, 2, 3, 4, 8, 9]
        run = RetrievalRun("i2t", np.vstack([ranking] * 2))
        per, _ = recall_ir(run, corpus, 5)
        assert per[0] == pytest.approx(2 / 5)
        per10, _ = recall_ir(run, corpus, 10)
        assert per10[0] == 1.0

    def test_t2i_equals_vse(self, tiny_corpus, rng):
        _, t2i = random_runs(tiny_corpus, rng)
        for k in (1, 2, 3):
            per_ir, mean_ir = recall_ir(t2i, tiny_corpus, k)
            per_vse, mean_vse = recall_vse(t2i, tiny_corpus, k)
            np.testing.assert_array_equal(per_ir, per_vse)
            assert mean_ir == mean_vse

    def test_inequality_vs_vse(self, tiny_corpus, rng):
        for _ in range(200):
            i2t, t2i = random_runs(tiny_corpus, rng)
            for run in (i2t, t2i):
                for k in (1, 2, 4):
                    per_ir, _ = recall_ir(run, tiny_corpus, k)
                    per_vse, _ = recall_vse(run, tiny_corpus, k)
                    assert (per_ir <= per_vse + 1e-15).all()


class TestSemanticRecall:
    def test_all_and_none_retrieved(self, tiny_sim, tiny_corpus):
        ext = build_extended_sets(RetrievalRun("i2t", np.zeros((3, 6), dtype=int)), tiny_sim, 5)
        # craft rankings: query 0 retrieves its whole extended set in top-5
        full = single_query_run("i2t", list(ext[0].indices[:5]), 6)
        per, _ = semantic_recall(_repeat_row(full, 3), ext, 5)
        assert per[0] == 1.0
        missing = single_query_run("i2t", [i for i in range(6) if i not in ext[0].indices][:1], 6)
        # ensure top-5 of this ranking avoids ext[0] where possible
        outside = [i for i in range(6) if i not in ext[0].indices]
        if len(outside) >= 5:
            run = single_query_run("i2t", outside[:5], 6)
            per2, _ = semantic_recall(_repeat_row(run, 3), ext, 5)
            assert per2[0] == 0.0

    def test_equals_recall_ir_when_extended_is_gt(self, tiny_corpus, tiny_sim, rng):
        i2t, _ = random_runs(tiny_corpus, rng)
        forced = [
            ExtendedGt("image", q, tuple(tiny_corpus.gt[q]), tuple(1.0 for _ in tiny_corpus.gt[q]))
            for q in range(tiny_corpus.n_images)
        ]
        for k in (1, 2, 3):
            per_sr, mean_sr = semantic_recall(i2t, forced, k)
            per_ir, mean_ir = recall_ir(i2t, tiny_corpus, k)
            np.testing.assert_array_equal(per_sr, per_ir)
            assert mean_sr == mean_ir


class TestNcs:
    def test_equal_mass_single_hit_is_exactly_point_two(self):
        # five extended items with equal mass; the top-5 retrieves exactly one
        ext = [ExtendedGt("image", 0, (0, 1, 2, 3, 4), (1.0, 1.0, 1.0, 1.0, 1.0))]
        run = RetrievalRun("i2t", np.asarray([[5, 0, 6, 7, 8, 1, 2, 3, 4]]))
        sim = SimMatrix(np.ones((1, 9)), SimMeta("cider-d", "lower-alnum", "x" * 64))
        per, mean = ncs(run, sim, ext, 5)
        assert per[0] == 0.2
        assert mean == 0.2

    def test_full_retrieval_scores_one(self, tiny_corpus, tiny_sim):
        run, _ = perfect_runs(tiny_corpus)
        ext = build_extended_sets(run, tiny_sim, 2)
        per, _ = ncs(run, tiny_sim, ext, 2)
        # image 0's extended set at m=2 is its own caption pair
        assert per[0] == 1.0

    def test_ncs_one_iff_extended_in_topk(self, tiny_corpus, tiny_sim, rng):
        for _ in range(50):
            i2t, _ = random_runs(tiny_corpus, rng)
            for k in (1, 2, 4):
                ext = build_extended_sets(i2t, tiny_sim, k)
                per, _ = ncs(i2t, tiny_sim, ext, k)
                for q in range(3):
                    inside = set(ext[q].indices) <= set(int(x) for x in i2t.rankings[q, :k])
                    if all(v > 0 for v in ext[q].values):
                        assert (per[q] == 1.0) == inside

    def test_matches_hand_summed_oracle(self, tiny_corpus, tiny_sim, rng):
        for _ in range(25):
            i2t, t2i = random_runs(tiny_corpus, rng)
            for run, kind in ((i2t, "image"), (t2i, "caption")):
                n_q = run.n_queries
                for k in (1, 2, 3):
                    m = 3
                    ext = build_extended_sets(run, tiny_sim, m)
                    per, _ = ncs(run, tiny_sim, ext, k)
                    for q in range(n_q):
                        vals = tiny_sim.values[q, :] if kind == "image" else tiny_sim.values[:, q]
                        order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:m]
                        want = naive_ncs_query(order, [vals[i] for i in order], run.rankings[q, :k])
                        assert per[q] == pytest.approx(want, abs=1e-12)

    def test_non_decreasing_in_k(self, tiny_corpus, tiny_sim, rng):
        i2t, t2i = random_runs(tiny_corpus, rng)
        for run in (i2t, t2i):
            ext = build_extended_sets(run, tiny_sim, 3)
            last_ncs = np.zeros(run.n_queries)
            last_sr = np.zeros(run.n_queries)
            last = {"rv": None, "r": None}
            for k in range(1, run.n_items + 1):
                per, _ = ncs(run, tiny_sim, ext, k)
                assert (per >= last_ncs - 1e-15).all()
                last_ncs = per
                per_sr, _ = semantic_recall(run, ext, k)
                assert (per_sr >= last_sr - 1e-15).all()
                last_sr = per_sr
                for name, fn in (("rv", recall_vse), ("r", recall_ir)):
                    cur, _ = fn(run, tiny_corpus, k)
                    if last[name] is not None:
                        assert (cur >= last[name] - 1e-15).all()
                    last[name] = cur

    def test_prefix_relabeling_invariance(self, tiny_corpus, tiny_sim, rng):
        i2t, _ = random_runs(tiny_corpus, rng)
        k = 2
        ext = build_extended_sets(i2t, tiny_sim, k)
        baseline = [
            recall_vse(i2t, tiny_corpus, k)[1],
            recall_ir(i2t, tiny_corpus, k)[1],
            semantic_recall(i2t, ext, k)[1],
            ncs(i2t, tiny_sim, ext, k)[1],
        ]
        shuffled = i2t.rankings.copy()
        for row in shuffled:
            row[k:] = row[k:][::-1]
        permuted = RetrievalRun("i2t", shuffled)
        assert [
            recall_vse(permuted, tiny_corpus, k)[1],
            recall_ir(permuted, tiny_corpus, k)[1],
            semantic_recall(permuted, ext, k)[1],
            ncs(permuted, tiny_sim, ext, k)[1],
        ] == baseline


class TestNcsNonGt:
    def test_gt_heavy_topk_scored_after_removal(self, tiny_corpus, tiny_sim):
        i2t, _ = perfect_runs(tiny_corpus)
        per, _ = ncs_non_gt(i2t, tiny_sim, tiny_corpus, m=2, k=2)
        # ground truth fills the original top-2; after removal the next two
        # items are scored, so a positive result is still possible
        assert (per >= 0.0).all()
        run_q0 = [c for c in i2t.rankings[0] if c not in tiny_corpus.gt[0]][:2]
        vals = tiny_sim.values[0]
        non_gt = [j for j in range(6) if j not in tiny_corpus.gt[0]]
        chosen = sorted(non_gt, key=lambda i: (-vals[i], i))[:2]
        den = sum(vals[i] for i in chosen)
        num = sum(vals[i] for i in chosen if i in set(run_q0))
        want = num / den if den > 0 else 0.0
        assert per[0] == pytest.approx(want, abs=1e-12)

    def test_zero_cross_image_similarity_scores_zero(self):
        sets = [
            [["a", "dog"], ["a", "cat"]],
            [["red", "bus"], ["red", "van"]],
        ]
        corpus = corpus_from_tokens(sets)
        sim = build_sim_matrix(corpus, build_df(corpus))
        i2t, _ = perfect_runs(corpus)
        per, mean = ncs_non_gt(i2t, sim, corpus, m=2, k=2)
        assert (per == 0.0).all()
        assert mean == 0.0

    def test_matches_manual_removal(self, tiny_corpus, tiny_sim, rng):
        for _ in range(25):
            i2t, t2i = random_runs(tiny_corpus, rng)
            for run, kind in ((i2t, "image"), (t2i, "caption")):
                per, _ = ncs_non_gt(run, tiny_sim, tiny_corpus, m=2, k=2)
                for q in range(run.n_queries):
                    gts = set(tiny_corpus.gt[q]) if kind == "image" else {tiny_corpus.image_of(q)}
                    vals = tiny_sim.values[q, :] if kind == "image" else tiny_sim.values[:, q]
                    kept = [i for i in run.rankings[q] if i not in gts]
                    cands = [i for i in range(len(vals)) if i not in gts]
                    chosen = sorted(cands, key=lambda i: (-vals[i], i))[:2]
                    want = naive_ncs_query(chosen, [vals[i] for i in chosen], kept[:2])
                    assert per[q] == pytest.approx(want, abs=1e-12)


class TestAggregate:
    def test_perfect_run_rsum_600(self, tiny_corpus, tiny_sim):
        i2t, t2i = perfect_runs(tiny_corpus)
        report = aggregate(i2t, t2i, tiny_corpus, tiny_sim)
        assert report.rsum == pytest.approx(600.0)

    def test_config_echo(self, tiny_corpus, tiny_sim):
        i2t, t2i = perfect_runs(tiny_corpus)
        report = aggregate(i2t, t2i, tiny_corpus, tiny_sim, m=4, non_gt=True)
        assert report.m == 4
        assert report.gt_removed is True
        assert report.scorer == "cider-d"
        assert "gt_removed: true" in report.to_table()
        assert "NCS(non-GT)" in report.to_table()

    def test_sums_match_component_metrics(self, tiny_corpus, tiny_sim, rng):
        i2t, t2i = random_runs(tiny_corpus, rng)
        report = aggregate(i2t, t2i, tiny_corpus, tiny_sim)
        want_rsum = 0.0
        want_nsum = 0.0
        for run in (i2t, t2i):
            for k in (1, 5, 10):
                kk = min(k, run.n_items)
                want_rsum += 100.0 * recall_vse(run, tiny_corpus, k)[1]
                ext = build_extended_sets(run, tiny_sim, k)
                want_nsum += 100.0 * ncs(run, tiny_sim, ext, k)[1]
        assert report.rsum == pytest.approx(want_rsum)
        assert report.nsum == pytest.approx(want_nsum)

    def test_requires_both_directions(self, tiny_corpus, tiny_sim, rng):
        i2t, _ = random_runs(tiny_corpus, rng)
        with pytest.raises(ValidationError):
            aggregate(i2t, i2t, tiny_corpus, tiny_sim)

    def test_json_rendering(self, tiny_corpus, tiny_sim):
        import json

        i2t, t2i = perfect_runs(tiny_corpus)
        doc = json.loads(aggregate(i2t, t2i, tiny_corpus, tiny_sim).to_json())
        assert doc["config"]["m"] == "k"
        assert 0.0 <= doc["cells"]["i2t"]["ncs"]["5"] <= 1.0


class TestPearson:
    def test_perfect_linearity(self):
        x = np.arange(100.0)
        assert pearson_r(x, 2 * x + 1) == 1.0

    def test_perfect_anticorrelation(self):
        x = np.arange(50.0)
        assert pearson_r(x, -x) == -1.0

    def test_matches_two_pass_oracle(self, rng):
        x = rng.normal(size=100)
        y = rng.normal(size=100)
        assert pearson_r(x, y) == pytest.approx(naive_pearson(list(x), list(y)), abs=1e-12)

    def test_symmetry_and_affine_invariance(self, rng):
        x = rng.normal(size=60)
        y = rng.normal(size=60)
        r = pearson_r(x, y)
        assert pearson_r(y, x) == pytest.approx(r, abs=1e-12)
        assert pearson_r(3.5 * x + 2.0, y) == pytest.approx(r, abs=1e-9)
        assert pearson_r(x, 0.25 * y - 7.0) == pytest.approx(r, abs=1e-9)

    def test_zero_variance_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_validation(self):
        with pytest.raises(ValidationError):
            pearson_r([1.0], [2.0])


class TestRunIO:
    def test_roundtrip(self, tmp_path, tiny_corpus, rng):
        i2t, _ = random_runs(tiny_corpus, rng)
        path = tmp_path / "run.itrr"
        save_run(i2t, path)
        again = load_run(path)
        assert again.direction == "i2t"
        np.testing.assert_array_equal(again.rankings, i2t.rankings)

    def test_non_permutation_rejected(self, tmp_path, tiny_corpus, rng):
        i2t, _ = random_runs(tiny_corpus, rng)
        rankings = i2t.rankings.copy()
        rankings[1, 0] = rankings[1, 1]
        path = tmp_path / "run.itrr"
        save_run(RetrievalRun("i2t", rankings), path)
        with pytest.raises(IntegrityError, match="query 1"):
            load_run(path)


class TestJudgmentCorrelation:
    def test_join_and_correlate(self, tmp_path):
        a = tmp_path / "judgments.tsv"
        a.write_text(
            "image_id\tcaption_id\tscore\nim1\tc1\t1.0\nim1\tc2\t2.0\nim2\tc1\t3.0\nim9\tc9\t9.0\n",
            encoding="utf-8",
        )
        b = tmp_path / "scores.tsv"
        b.write_text(
            "image_id\tcaption_id\tscore\nim1\tc1\t2.0\nim1\tc2\t4.0\nim2\tc1\t6.0\nim8\tc8\t1.0\n",
            encoding="utf-8",
        )
        r, n = correlate_judgments(read_score_tsv(a), read_score_tsv(b))
        assert n == 3
        assert r == pytest.approx(1.0, abs=1e-12)

    def test_header_required(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("im1\tc1\t1.0\n", encoding="utf-8")
        from itmkit.errors import FileFormatError

        with pytest.raises(FileFormatError, match="header"):
            read_score_tsv(bad)
