import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphann.bench import measure_recall
from graphann.dataset import VectorSet, brute_force_ground_truth, generate_synthetic
from graphann.graph import HnswIndex, IndexParams, IndexStateError, build, insert
from graphann.refine import (
    SCALE_FLOOR,
    QuantizedSet,
    asymmetric_distance,
    build_edge_metadata,
    quantize_sq8,
    refine_search,
)
from graphann.search import SearchParams, search_batch, search_knn


@pytest.fixture(scope="module")
def small_quant(small_index):
    return quantize_sq8(small_index.vectors), build_edge_metadata(small_index)


class TestQuantize:
    def test_constant_column(self):
        q = quantize_sq8(VectorSet.from_array([[1.0, 3.0], [2.0, 3.0], [5.0, 3.0]]))
        assert np.all(q.codes[:, 1] == 0)
        assert q.scale[1] == SCALE_FLOOR

    def test_endpoints(self):
        s = 0.5
        q = quantize_sq8(VectorSet.from_array([[0.0], [255 * s], [10 * s]]))
        assert q.codes[:, 0].tolist() == [0, 255, 10]

    def test_decode_error_half_step(self):
        base = generate_synthetic(1000, 16, 3)
        q = quantize_sq8(base)
        err = np.abs(q.decode() - base.data.astype(np.float64))
        assert np.all(err <= q.scale / 2 + 1e-9)
        assert np.all(q.scale > 0)

    def test_deterministic(self, small_base):
        a, b = quantize_sq8(small_base), quantize_sq8(small_base)
        assert a.codes.tobytes() == b.codes.tobytes()

    def test_encode_decode_inverse_on_grid(self, small_base):
        q = quantize_sq8(small_base)
        np.testing.assert_array_equal(q.encode(q.decode()), q.codes)


class TestAsymmetricDistance:
    def test_one_dim(self):
        q = QuantizedSet(np.array([[5]], np.uint8), np.zeros(1), np.ones(1))
        assert asymmetric_distance([7.0], [5], q) == pytest.approx(4.0)

    def test_representable_vector(self):
        q = QuantizedSet(np.array([[0, 10, 255]], np.uint8), np.array([1.0, -2.0, 0.0]),
                         np.array([0.5, 0.25, 1.0]))
        x = q.decode()[0]
        assert abs(asymmetric_distance(x, q.codes[0], q)) <= 1e-9

    def test_dim_mismatch(self, small_base):
        q = quantize_sq8(small_base)
        with pytest.raises(ValueError):
            asymmetric_distance(np.zeros(small_base.dim + 1), q.codes[0], q)

    def test_matches_decoded_squared_l2(self, small_base, small_queries):
        q = quantize_sq8(small_base)
        dec = q.decode()
        for r in range(20):
            x = small_queries.data[r].astype(np.float64)
            for i in (0, 7, 1999):
                want = float(np.sum((x - dec[i]) ** 2))
                assert asymmetric_distance(x, q.codes[i], q) == pytest.approx(want, rel=1e-9, abs=1e-9)

    def test_close_to_exact(self, small_base, small_queries):
        q = quantize_sq8(small_base)
        bound = small_base.dim * float(q.scale.max()) ** 2 * 2
        for r in range(20):
            x = small_queries.data[r].astype(np.float64)
            for i in range(0, 2000, 101):
                exact = float(np.sum((x - small_base.data[i]) ** 2))
                approx = asymmetric_distance(x, q.codes[i], q)
                assert abs(approx - exact) <= bound + 2 * np.sqrt(exact * bound)

    def test_angular_is_one_minus_dot(self, small_angular):
        base, _ = small_angular
        q = quantize_sq8(base)
        x = base.data[3].astype(np.float64)
        want = 1.0 - float(x @ q.decode()[11])
        assert asymmetric_distance(x, q.codes[11], q) == pytest.approx(want, abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 9), st.integers(0, 2**31))
    def test_expanded_form_property(self, dim, seed):
        rng = np.random.default_rng(seed)
        codes = rng.integers(0, 256, size=(1, dim)).astype(np.uint8)
        q = QuantizedSet(codes, rng.normal(size=dim), rng.uniform(1e-3, 2, size=dim))
        x = rng.normal(size=dim) * 3
        want = float(np.sum((x - q.decode()[0]) ** 2))
        assert asymmetric_distance(x, codes[0], q) == pytest.approx(want, rel=1e-9, abs=1e-9)


class TestEdgeMetadata:
    def test_single_node(self):
        idx = build(generate_synthetic(1, 4, 0), IndexParams(M=4, ef_construction=8))
        meta = build_edge_metadata(idx)
        assert meta.edge_count(0, 0) == 0 and meta.pattern_score(0, 0) == 0.0

    def test_full_layer0_slots(self, desk_index):
        meta = build_edge_metadata(desk_index)
        full = int(np.flatnonzero((desk_index.level0 >= 0).sum(axis=1) == 32)[0])
        assert meta.edge_count(0, full) == 32
        assert meta.pattern_score(0, full) == 1.0

    def test_recount_matches(self, small_index):
        meta = build_edge_metadata(small_index)
        for lvl in range(small_index.max_level + 1):
            for v in small_index.layer_nodes(lvl):
                v = int(v)
                count = sum(1 for u in small_index.slots(v, lvl) if u != -1)
                assert meta.edge_count(lvl, v) == count
                assert 0.0 <= meta.pattern_score(lvl, v) <= 1.0
                assert meta.pattern_score(lvl, v) == count / small_index.cap(lvl)

    def test_absent_layer(self, small_index):
        meta = build_edge_metadata(small_index)
        low = int(np.flatnonzero(small_index.node_level == 0)[0])
        with pytest.raises(ValueError):
            meta.edge_count(1, low)

    def test_unfrozen(self):
        idx = HnswIndex.empty(2, "euclidean", IndexParams(M=4, ef_construction=8))
        insert(idx, 0, [0.0, 0.0])
        with pytest.raises(IndexStateError):
            build_edge_metadata(idx)


class TestRefineSearch:
    def test_count_mismatch(self, small_index):
        other = quantize_sq8(generate_synthetic(10, small_index.dim, 1))
        with pytest.raises(ValueError):
            refine_search(small_index, other, build_edge_metadata(small_index),
                          np.zeros(small_index.dim))

    def test_pool_rerank_is_exact_sort(self, small_index, small_quant, small_queries):
        quant, meta = small_quant
        p = SearchParams(k=40, ef=40)
        for q in small_queries.data[:20]:
            res = refine_search(small_index, quant, meta, q, p)
            true = np.linalg.norm(small_index.vectors.data[res.ids].astype(float) - q, axis=1)
            np.testing.assert_allclose(res.distances, true, rtol=1e-5, atol=1e-6)
            assert np.all(np.diff(res.distances) >= 0)

    def test_rerank_dominance(self, small_index, small_quant, small_queries):
        quant, meta = small_quant
        k_small = refine_search(small_index, quant, meta, small_queries.data[0], SearchParams(k=5, ef=40))
        k_pool = refine_search(small_index, quant, meta, small_queries.data[0], SearchParams(k=40, ef=40))
        np.testing.assert_array_equal(k_small.ids, k_pool.ids[:5])
        assert k_small.distances[-1] <= k_pool.distances[5:].min()

    def test_lookahead_and_prefetch_neutral(self, small_index, small_quant, small_queries):
        quant, meta = small_quant
        for q in small_queries.data:
            a = refine_search(small_index, quant, meta, q, SearchParams(k=10, ef=64), lookahead=4)
            b = refine_search(small_index, quant, meta, q,
                              SearchParams(k=10, ef=64, prefetch_enabled=False), lookahead=0)
            c = refine_search(small_index, quant, meta, q, SearchParams(k=10, ef=64), gate=0.0)
            np.testing.assert_array_equal(a.ids, b.ids)
            np.testing.assert_array_equal(a.ids, c.ids)

    def test_recall_close_to_full_precision(self, small_index, small_quant, small_queries, small_base):
        quant, meta = small_quant
        gt = brute_force_ground_truth(small_base, small_queries, 10)
        p = SearchParams(k=10, ef=64)
        full, _ = search_batch(small_index, small_queries, p)
        ref, _ = search_batch(small_index, small_queries, p,
                              lambda i, q, pp: refine_search(i, quant, meta, q, pp))
        assert abs(measure_recall(full, gt, 10) - measure_recall(ref, gt, 10)) <= 0.01

    def test_angular(self, small_angular):
        base, idx = small_angular
        quant, meta = quantize_sq8(base), build_edge_metadata(idx)
        qs = generate_synthetic(50, idx.dim, 80, "angular")
        gt = brute_force_ground_truth(base, qs, 10)
        ids, _ = search_batch(idx, qs, SearchParams(k=10, ef=64),
                              lambda i, q, p: refine_search(i, quant, meta, q, p))
        assert measure_recall(ids, gt, 10) >= 0.95

    def test_k_at_least_count(self):
        base = generate_synthetic(6, 3, 1)
        idx = build(base, IndexParams(M=4, ef_construction=8))
        res = refine_search(idx, quantize_sq8(base), build_edge_metadata(idx), base.data[2],
                            SearchParams(k=6, ef=6))
        assert res.ids[0] == 2 and sorted(res.ids.tolist()) == list(range(6))
