import numpy as np
import pytest

from selfalign.encoder import ModelParams
from selfalign.features import RawImageFeatures, RawTextFeatures
from selfalign.retrieval import (IMAGE, TEXT, Embedding, RecallResult, RetrievalIndex, ScoreConfig, bench_csv,
                                 bench_latency, build_index, complexity_report, embed, evaluate_pairs,
                                 linear_fit_r2, pair_score, rank_candidates, read_index, recall_at_k,
                                 write_index)
from selfalign.trainer import ablation


def test_identical_candidate_scores_two(rng):
    g, f, a = rng.standard_normal((3, 5))
    idx = RetrievalIndex(np.stack([np.stack([g, a, f]), rng.standard_normal((3, 5))]), ["x", "y"], IMAGE, "s")
    q = Embedding(g, f, a, TEXT)
    assert idx.scores(q)[0] == pytest.approx(2.0, abs=1e-6)
    assert rank_candidates(q, idx)[0] == 0


def test_query_modality_must_differ(rng):
    idx = RetrievalIndex(rng.standard_normal((2, 3, 4)), ["a", "b"], IMAGE, "s")
    with pytest.raises(ValueError):
        idx.scores(Embedding(*rng.standard_normal((3, 4)), IMAGE))


def test_ties_keep_insertion_order(rng):
    row = rng.standard_normal((3, 4))
    idx = RetrievalIndex(np.stack([row] * 4), list("abcd"), TEXT, "s")
    q = Embedding(*rng.standard_normal((3, 4)), IMAGE)
    assert rank_candidates(q, idx).tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("variant", ["full", "baseline", "wo-tg", "wo-vg"])
def test_index_scores_match_pairwise(variant, model, small_dataset):
    model.eval()
    score = ScoreConfig.from_ablation(ablation(variant))
    pairs = small_dataset.val
    index = build_index([p.image for p in pairs], model, IMAGE, score=score)
    q = embed(pairs[0].text, model, TEXT, score)
    brute = [pair_score(p.image, pairs[0].text, model, score) for p in pairs]
    np.testing.assert_allclose(index.scores(q), brute, atol=1e-5)
    tindex = build_index([p.text for p in pairs], model, TEXT, score=score)
    qi = embed(pairs[1].image, model, IMAGE, score)
    np.testing.assert_allclose(tindex.scores(qi), [pair_score(pairs[1].image, p.text, model, score) for p in pairs],
                               atol=1e-5)


def test_index_round_trip(tmp_path, model, small_dataset):
    index = build_index([p.text for p in small_dataset.val], model, TEXT, ids=[f"t{i}" for i in range(12)])
    assert index.floats_per_candidate == 3 * model.hidden
    assert not index.vectors.flags.writeable
    write_index(tmp_path, index)
    back = read_index(tmp_path)
    assert back.vectors.tobytes() == index.vectors.tobytes()
    assert back.ids == index.ids and back.bn_snapshot_id == model.bn_snapshot_id()


def test_threaded_build_is_identical(model, small_dataset):
    items = [p.image for p in small_dataset.pairs]
    a = build_index(items, model, IMAGE, threads=1)
    b = build_index(items, model, IMAGE, threads=3)
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_recall_at_k():
    rankings = [[2, 0, 1], [0, 1, 2], [1, 2, 0]]
    r = recall_at_k(rankings, [0, 0, {1, 2}], ks=(1, 2, 5))
    assert r == {1: pytest.approx(2 / 3), 2: 1.0, 5: 1.0}
    with pytest.raises(ValueError):
        recall_at_k(rankings, [0, 0])
    res = RecallResult({1: 0.5, 5: 1.0, 10: 1.0}, {1: 0.25, 5: 0.5, 10: 1.0})
    assert res.rsum == pytest.approx(425.0)


def test_evaluate_pairs_shape(model, small_dataset):
    res = evaluate_pairs(small_dataset.val, model)
    assert set(res.i2t) == {1, 5, 10} and 0 <= res.rsum <= 600


def test_complexity_report():
    rows = {r.model: r for r in complexity_report(hidden=16)}
    assert rows["selfalign"].interactions == "1x1" and rows["selfalign"].dim == 48
    assert rows["baseline"].dim == 16
    assert rows["cross-attention"].interactions_per_pair == 36 * 32
    assert complexity_report(hidden=2048)[1].dim == 6144


def test_bench_rows_and_csv():
    params = ModelParams.init(32, 24, 8, 6)
    rows = bench_latency(params, [10, 20], n_queries=2, repetitions=2, warmup=1)
    assert [r.n_candidates for r in rows] == [10, 20]
    assert all(r.encode_ms > 0 and r.score_ms > 0 for r in rows)
    text = bench_csv(rows)
    assert text.splitlines()[0] == "n_candidates,encode_ms,score_ms,n_queries,repetitions"
    assert len(text.splitlines()) == 3


def test_linear_fit():
    a, b, r2 = linear_fit_r2([1, 2, 3, 4], [3, 5, 7, 9])
    assert (a, b, r2) == pytest.approx((1.0, 2.0, 1.0))


def test_embedding_dimension_check(model):
    from selfalign.container import ShapeMismatch
    with pytest.raises(ShapeMismatch):
        embed(RawImageFeatures(np.zeros((2, 5))), model, IMAGE)
    with pytest.raises(ValueError):
        embed(RawTextFeatures(np.zeros((2, 24))), model, "audio")
