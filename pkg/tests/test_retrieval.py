import numpy as np
import pytest

from ecg.retrieval import (
    HEADER_BYTES,
    DualStoreComparison,
    EmbeddingStore,
    StoreFormatError,
    compare_dual_store,
    disk_usage,
    maxsim,
    search_topk,
    store_read,
    store_write,
)


def maxsim_oracle(q, d):
    """Brute-force triple loop over query rows, doc rows, coordinates."""
    total = 0.0
    for qi in q:
        best = -np.inf
        for dj in d:
            dot = 0.0
            for a, b in zip(qi, dj):
                dot += a * b
            best = max(best, dot)
        total += best
    return total / len(q)


def random_store(rng, count, n=3, m=4):
    store = EmbeddingStore(m)
    for pid in range(count):
        store.add(pid, rng.normal(size=(n, m)).astype(np.float32))
    return store


class TestMaxsim:
    def test_unit_match(self):
        assert maxsim(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]])) == 1.0

    def test_mean_over_query_vectors(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        d = np.array([[0.0, 1.0]])
        assert maxsim(q, d) == pytest.approx(0.5)
        assert maxsim(q, d) == pytest.approx(maxsim_oracle(q, d))

    def test_zero_query(self):
        q = np.zeros((2, 3))
        d = np.ones((4, 3))
        assert maxsim(q, d) == 0.0

    def test_matches_oracle_on_200_seeded_pairs(self):
        rng = np.random.default_rng(1234)
        for _ in range(200):
            nq, nd, m = rng.integers(1, 9, size=3)
            q = rng.normal(size=(nq, m))
            d = rng.normal(size=(nd, m))
            assert abs(maxsim(q, d) - maxsim_oracle(q, d)) < 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            maxsim(np.ones((1, 2)), np.ones((1, 3)))

    def test_empty_embedding(self):
        with pytest.raises(ValueError):
            maxsim(np.ones((0, 2)), np.ones((1, 2)))


class TestMaxsimProperties:
    N_CASES = 1000

    def test_monotone_in_doc_vectors(self):
        rng = np.random.default_rng(7)
        for _ in range(self.N_CASES):
            nq, nd, m = rng.integers(1, 6, size=3)
            q, d = rng.normal(size=(nq, m)), rng.normal(size=(nd, m))
            extra = rng.normal(size=(1, m))
            assert maxsim(q, np.vstack([d, extra])) >= maxsim(q, d) - 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(self.N_CASES):
            nq, nd, m = rng.integers(1, 6, size=3)
            q, d = rng.normal(size=(nq, m)), rng.normal(size=(nd, m))
            qp = q[rng.permutation(nq)]
            dp = d[rng.permutation(nd)]
            assert maxsim(qp, d) == pytest.approx(maxsim(q, d), abs=1e-12)
            assert maxsim(q, dp) == pytest.approx(maxsim(q, d), abs=1e-12)

    def test_query_scale_equivariance_and_argsort_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(self.N_CASES):
            nq, m = rng.integers(1, 6, size=2)
            q = rng.normal(size=(nq, m))
            docs = [rng.normal(size=(rng.integers(1, 6), m)) for _ in range(4)]
            c = float(rng.uniform(0.1, 10.0))
            base = np.array([maxsim(q, d) for d in docs])
            scaled = np.array([maxsim(c * q, d) for d in docs])
            np.testing.assert_allclose(scaled, c * base, rtol=1e-12)
            assert list(np.argsort(-base, kind="stable")) == list(np.argsort(-scaled, kind="stable"))


class TestSearch:
    def test_self_retrieval(self):
        rng = np.random.default_rng(0)
        q = rng.normal(size=(3, 4)).astype(np.float32)
        store = EmbeddingStore(4)
        store.add(17, q)
        for pid, c in [(0, 0.5), (1, 0.25), (2, 0.75)]:
            store.add(pid, (c * q).astype(np.float32))
        assert search_topk(q, store, k=1)[0].passage_id == 17

    def test_hand_computed_order(self):
        store = EmbeddingStore(2)
        store.add(0, np.array([[0.5, 0.0]], dtype=np.float32))  # score 0.5
        store.add(1, np.array([[0.2, 0.0]], dtype=np.float32))  # score 0.2
        results = search_topk(np.array([[1.0, 0.0]]), store, k=2)
        assert [r.passage_id for r in results] == [0, 1]
        assert results[0].score == pytest.approx(0.5)
        assert [r.rank for r in results] == [1, 2]

    def test_k_equals_count_is_permutation(self):
        rng = np.random.default_rng(3)
        store = random_store(rng, 20)
        results = search_topk(rng.normal(size=(2, 4)), store, k=20)
        assert sorted(r.passage_id for r in results) == list(range(20))
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_k_beyond_count_returns_all_with_warning(self):
        rng = np.random.default_rng(4)
        store = random_store(rng, 5)
        with pytest.warns(UserWarning, match="exceeds store size"):
            results = search_topk(rng.normal(size=(2, 4)), store, k=10)
        assert len(results) == 5

    def test_tie_break_ascending_id(self):
        store = EmbeddingStore(2)
        vec = np.array([[1.0, 0.0]], dtype=np.float32)
        for pid in (5, 2, 9):
            store.add(pid, vec)
        results = search_topk(np.array([[1.0, 0.0]]), store, k=3)
        assert [r.passage_id for r in results] == [2, 5, 9]

    def test_matches_sort_all_oracle_on_seeded_corpora(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            count = int(rng.integers(2, 60))
            store = random_store(rng, count)
            q = rng.normal(size=(2, 4))
            expected = sorted(((maxsim(q, rec.vectors), rec.source_id) for rec in store), key=lambda p: (-p[0], p[1]))
            got = search_topk(q, store, k=count)
            assert [r.passage_id for r in got] == [pid for _, pid in expected]

    def test_parallel_equals_serial(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            store = random_store(rng, int(rng.integers(8, 80)))
            q = rng.normal(size=(3, 4))
            serial = search_topk(q, store, k=5, threads=1)
            parallel = search_topk(q, store, k=5, threads=4)
            assert serial == parallel

    def test_empty_store_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            search_topk(np.ones((1, 4)), EmbeddingStore(4), k=1)


class TestStoreFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        store = EmbeddingStore(6)
        for pid in range(10):
            store.add(pid * 3, rng.normal(size=(int(rng.integers(1, 5)), 6)).astype(np.float32))
        path = tmp_path / "index.ecgs"
        store_write(store, path)
        loaded = store_read(path)
        assert len(loaded) == 10
        for rec, orig in zip(loaded, store):
            assert rec.source_id == orig.source_id
            assert np.array_equal(rec.vectors, orig.vectors)
        second = tmp_path / "again.ecgs"
        store_write(loaded, second)
        assert path.read_bytes() == second.read_bytes()

    def test_empty_store_header_only(self, tmp_path):
        path = tmp_path / "empty.ecgs"
        store_write(EmbeddingStore(8), path)
        blob = path.read_bytes()
        assert len(blob) == HEADER_BYTES
        assert blob[:4] == b"ECGS"
        assert len(store_read(path)) == 0

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.ecgs"
        path.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(StoreFormatError, match="magic"):
            store_read(path)

    def test_truncated_file(self, tmp_path):
        store = EmbeddingStore(4)
        store.add(1, np.ones((2, 4), dtype=np.float32))
        path = tmp_path / "trunc.ecgs"
        store_write(store, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(StoreFormatError, match="truncated"):
            store_read(path)

    def test_duplicate_id_rejected(self):
        store = EmbeddingStore(4)
        store.add(1, np.ones((1, 4), dtype=np.float32))
        with pytest.raises(StoreFormatError, match="duplicate"):
            store.add(1, np.ones((1, 4), dtype=np.float32))


class TestDiskUsage:
    def test_byte_formula(self):
        store = EmbeddingStore(64)
        rng = np.random.default_rng(0)
        for pid in range(10):
            store.add(pid, rng.normal(size=(16, 64)).astype(np.float32))
        assert disk_usage(store) == 41036  # 16 + 10*(6 + 16*64*4)

    def test_matches_actual_file_size(self, tmp_path):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            m = int(rng.integers(2, 12))
            store = EmbeddingStore(m)
            for pid in range(int(rng.integers(0, 15))):
                store.add(pid, rng.normal(size=(int(rng.integers(1, 6)), m)).astype(np.float32))
            path = tmp_path / f"s{seed}.ecgs"
            store_write(store, path)
            assert disk_usage(store) == path.stat().st_size

    def test_dual_store_payload_ratio_exactly_half(self):
        rng = np.random.default_rng(1)
        for _ in range(25):
            n, m, count = (int(x) for x in rng.integers(1, 40, size=3))
            cmp = compare_dual_store(n, m, count)
            assert cmp.payload_ratio == 0.5
            assert cmp.dual_bytes == 2 * cmp.unified_bytes

    def test_empty_corpus_ratio_defined_as_one(self):
        cmp = compare_dual_store(4, 8, 0)
        assert cmp == DualStoreComparison(HEADER_BYTES, 2 * HEADER_BYTES, 1.0, 1.0)


def test_loaded_store_is_frozen(tmp_path):
    store = EmbeddingStore(4)
    store.add(1, np.ones((2, 4), dtype=np.float32))
    path = tmp_path / "s.ecgs"
    store_write(store, path)
    loaded = store_read(path)
    with pytest.raises(StoreFormatError, match="read-only"):
        loaded.add(2, np.ones((2, 4), dtype=np.float32))
