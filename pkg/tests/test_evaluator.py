import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vbranch.branching import ModelConfig, build_model
from vbranch.errors import ModelError, ShapeError
from vbranch.evaluator import (BENCH_HEADER, EmbeddingIndex, bench_branches, bench_csv, embed_arrays,
                               euclidean_distances, measured_flops, mirror, rank_queries, static_flops)
from vbranch.verify import brute_force_ranking

SMALL = ModelConfig(input_shape=(16, 8, 3), stem_channels=(4, 8), stem_strides=(1, 2),
                    block_channels=(12, 12), hidden=24, embed=12)


def _index(names, ids, cams, xs):
    return EmbeddingIndex(list(names), np.array(ids), np.array(cams), np.array(xs, dtype=float).reshape(len(names), -1))


class TestRanking:
    def test_hand_example(self):
        # ranked after exclusions: g1 (hit), g2 (miss), g3 (hit) -> AP = (1 + 2/3) / 2
        q = _index(["q"], [1], [0], [0.0])
        g = _index(["junk", "same_cam", "g1", "g2", "g3"], [-1, 1, 1, 2, 1], [1, 0, 1, 1, 1],
                   [0.1, 0.5, 1.0, 2.0, 3.0])
        rep = rank_queries(q, g)
        assert rep.ranked[0] == ["g1", "g2", "g3"]
        assert rep.ap == [(1 + 2 / 3) / 2]
        assert rep.map == (1 + 2 / 3) / 2
        assert rep.rank(1) == 1.0

    def test_same_camera_exclusion_moves_first_hit(self):
        q = _index(["q"], [1], [0], [0.0])
        g = _index(["a", "b", "c"], [1, 2, 1], [0, 1, 1], [0.0, 1.0, 2.0])
        rep = rank_queries(q, g)
        assert rep.rank(1) == 0.0 and rep.rank(2) == 1.0
        assert rep.map == 0.5

    def test_ties_break_by_sample_id(self):
        q = _index(["q"], [1], [0], [0.0])
        g = _index(["zz", "aa"], [2, 1], [1, 1], [1.0, -1.0])
        assert rank_queries(q, g).ranked[0] == ["aa", "zz"]

    def test_query_without_match_is_skipped(self):
        q = _index(["q1", "q2"], [1, 5], [0, 0], [0.0, 0.0])
        g = _index(["a", "b"], [1, 2], [1, 1], [1.0, 2.0])
        rep = rank_queries(q, g)
        assert rep.skipped == ["q2"] and rep.map == 1.0

    def test_threads_do_not_change_result(self):
        rng = np.random.default_rng(0)
        q = _index([f"q{i}" for i in range(20)], rng.integers(0, 5, 20), rng.integers(0, 2, 20), rng.normal(size=(20, 3)))
        g = _index([f"g{i}" for i in range(40)], rng.integers(0, 5, 40), rng.integers(0, 2, 40), rng.normal(size=(40, 3)))
        a, b = rank_queries(q, g), rank_queries(q, g, threads=4)
        assert a.ap == b.ap and np.array_equal(a.cmc, b.cmc)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            rank_queries(_index(["q"], [1], [0], [[0.0, 1.0]]), _index(["g"], [1], [1], [[0.0]]))

    def test_report_formats(self):
        q = _index(["q"], [1], [0], [0.0])
        g = _index(["g"], [1], [1], [1.0])
        rep = rank_queries(q, g)
        assert rep.to_csv().splitlines() == ["metric,value", "mAP,1.000000", "rank-1,1.000000",
                                             "rank-5,1.000000", "rank-10,1.000000"]
        assert rep.per_query_csv().splitlines()[1] == "q,1.000000"


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_ranking_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    nq, ng = int(rng.integers(1, 5)), int(rng.integers(2, 10))
    qe, ge = rng.normal(size=(nq, 2)), rng.normal(size=(ng, 2))
    qi, gi = rng.integers(0, 3, nq), rng.integers(-1, 3, ng)
    qc, gc = rng.integers(0, 2, nq), rng.integers(0, 2, ng)
    names = [f"g{j}" for j in range(ng)]
    rep = rank_queries(EmbeddingIndex([f"q{j}" for j in range(nq)], qi, qc, qe), EmbeddingIndex(names, gi, gc, ge))
    cmc, m, skipped = brute_force_ranking(qe, qi, qc, ge, gi, gc, names)
    assert len(rep.skipped) == skipped
    if rep.ap:
        assert list(rep.cmc) == cmc and rep.map == m


def test_distances_are_exact_on_diagonal():
    x = np.random.default_rng(0).normal(size=(5, 4))
    d = euclidean_distances(x, x)
    assert np.all(np.diag(d) == 0.0) and np.array_equal(d, d.T)


class TestEmbedding:
    def test_flip_on_symmetric_images_is_noop(self):
        m = build_model(SMALL, 2, 0.0, np.random.default_rng(0))
        half = np.random.default_rng(1).normal(size=(3, 16, 4, 3))
        x = np.concatenate([half, mirror(half)], axis=2)
        np.testing.assert_allclose(embed_arrays(m, x, flip=True), embed_arrays(m, x), rtol=1e-12, atol=1e-12)

    def test_batching_does_not_change_result(self):
        m = build_model(SMALL, 2, 0.0, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(7, 16, 8, 3))
        np.testing.assert_allclose(embed_arrays(m, x, batch_size=3), embed_arrays(m, x), rtol=1e-12)

    def test_wrong_input(self):
        m = build_model(SMALL, 1, 0.0, np.random.default_rng(0))
        with pytest.raises(ModelError):
            embed_arrays(m, np.zeros((2, 8, 8, 3)))


class TestFlops:
    @pytest.mark.parametrize("b", [1, 2, 3, 5])
    def test_static_count_matches_measured(self, b):
        m = build_model(SMALL, b, 0.0, np.random.default_rng(0))
        assert measured_flops(m) == static_flops(SMALL, b)["total"]

    def test_affine_in_branches(self):
        counts = [measured_flops(build_model(SMALL, b, 0.0, np.random.default_rng(0))) for b in range(1, 5)]
        slope = static_flops(SMALL, 1)["branch"]
        assert np.diff(counts).tolist() == [slope] * 3

    def test_sharing_does_not_change_count(self):
        a = measured_flops(build_model(SMALL, 3, 0.0, np.random.default_rng(0)))
        b = measured_flops(build_model(SMALL, 3, 0.5, np.random.default_rng(0)))
        assert a == b


def test_bench_rows():
    rows = bench_branches(SMALL, [1, 2], reps=1, infer_samples=8, batch=6)
    assert [r["b"] for r in rows] == [1, 2]
    lines = bench_csv(rows).splitlines()
    assert lines[0] == ",".join(BENCH_HEADER) and len(lines) == 3
