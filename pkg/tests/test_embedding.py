"""Embedders, cosine similarity, and exact top-k search."""

import json

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathtrack.embedding import (
    DimensionMismatch,
    EmbeddingError,
    EmbeddingIndex,
    HashEmbedder,
    HttpEmbedder,
    cosine_sim,
    embed_into_index,
    top_k,
)


class TestCosine:
    def test_orthogonal(self):
        assert cosine_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_identical(self):
        v = np.array([3.0, 4.0])
        assert cosine_sim(v, v) == pytest.approx(1.0)

    def test_opposite(self):
        v = np.array([1.0, 2.0])
        assert cosine_sim(v, -v) == pytest.approx(-1.0)

    def test_known_value(self):
        # [1,1] against [1,0] is 1/sqrt(2).
        got = cosine_sim(np.array([1.0, 1.0]), np.array([1.0, 0.0]))
        assert got == pytest.approx(0.70710678, abs=1e-6)

    def test_scale_invariant(self):
        a = np.array([0.2, 0.5, -0.1])
        b = np.array([1.0, -0.3, 0.8])
        assert cosine_sim(a, b) == pytest.approx(cosine_sim(a * 7.5, b * 0.01))

    def test_zero_vector_defined_as_zero(self):
        assert cosine_sim(np.zeros(4), np.ones(4)) == 0.0
        assert cosine_sim(np.ones(4), np.zeros(4)) == 0.0
        assert cosine_sim(np.zeros(4), np.zeros(4)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_sim(np.ones(3), np.ones(4))

    @given(
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
    )
    def test_bounded(self, a, b):
        got = cosine_sim(np.array(a), np.array(b))
        assert -1.0 - 1e-9 <= got <= 1.0 + 1e-9


class TestHashEmbedder:
    def test_deterministic_across_instances(self):
        a = HashEmbedder(dim=128).embed(["Andy Rubin created Android."])
        b = HashEmbedder(dim=128).embed(["Andy Rubin created Android."])
        np.testing.assert_array_equal(a, b)

    def test_unit_norm(self):
        vecs = HashEmbedder(dim=64).embed(["alpha", "beta gamma", "x"])
        norms = np.linalg.norm(vecs, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_case_and_whitespace_insensitive(self):
        emb = HashEmbedder(dim=64)
        a = emb.embed(["Andy  Rubin"])
        b = emb.embed(["andy rubin"])
        np.testing.assert_array_equal(a, b)

    def test_empty_text_is_zero_vector(self):
        vecs = HashEmbedder(dim=64).embed(["", "   "])
        np.testing.assert_array_equal(vecs, np.zeros((2, 64)))

    def test_empty_batch(self):
        assert HashEmbedder(dim=64).embed([]).shape == (0, 64)

    def test_shared_ngrams_score_higher(self):
        emb = HashEmbedder(dim=256)
        base, near, far = emb.embed(["android os", "android", "quarterly revenue"])
        assert cosine_sim(base, near) > cosine_sim(base, far)

    def test_rejects_tiny_dim(self):
        with pytest.raises(EmbeddingError):
            HashEmbedder(dim=4)
        with pytest.raises(EmbeddingError):
            HashEmbedder(ngram=0)

    def test_output_dtype_and_shape(self):
        vecs = HashEmbedder(dim=32).embed(["a", "b", "c"])
        assert vecs.shape == (3, 32)
        assert vecs.dtype == np.float64

    @given(st.text(max_size=60))
    @settings(max_examples=40)
    def test_self_similarity_one_or_zero(self, text):
        emb = HashEmbedder(dim=64)
        vec = emb.embed([text])[0]
        sim = cosine_sim(vec, vec)
        if np.linalg.norm(vec) == 0:
            assert sim == 0.0
        else:
            assert sim == pytest.approx(1.0)


def brute_force_top_k(query, keys, vectors, k):
    query = np.asarray(query, dtype=np.float64)
    scored = []
    for key, vec in zip(keys, vectors):
        vec = np.asarray(vec, dtype=np.float64)
        if np.linalg.norm(vec) == 0:
            continue
        scored.append((key, cosine_sim(query, vec)))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


class TestEmbeddingIndex:
    def test_build_normalizes_rows(self):
        idx = EmbeddingIndex.build(["a"], np.array([[3.0, 4.0]]))
        np.testing.assert_allclose(idx.vector("a"), [0.6, 0.8])

    def test_zero_rows_kept_as_zero(self):
        idx = EmbeddingIndex.build(["a", "z"], np.array([[1.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(idx.vector("z"), [0.0, 0.0])

    def test_duplicate_keys_rejected(self):
        with pytest.raises(EmbeddingError, match="unique"):
            EmbeddingIndex.build(["a", "a"], np.eye(2))

    def test_shape_key_mismatch(self):
        with pytest.raises(EmbeddingError, match="one vector per key"):
            EmbeddingIndex.build(["a", "b"], np.eye(3))

    def test_unknown_key(self):
        idx = EmbeddingIndex.build(["a"], np.eye(1))
        with pytest.raises(EmbeddingError, match="unknown embedding key"):
            idx.vector("b")

    def test_contains(self):
        idx = EmbeddingIndex.build(["a"], np.eye(1))
        assert "a" in idx
        assert "b" not in idx


class TestTopK:
    def test_exact_ranking(self):
        keys = ["n", "e", "s"]
        vectors = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
        idx = EmbeddingIndex.build(keys, vectors)
        got = top_k(np.array([0.1, 1.0]), idx, 2)
        assert [key for key, _ in got] == ["n", "e"]
        assert got[0][1] > got[1][1]

    def test_ties_break_by_key(self):
        vectors = np.array([[1.0, 0.0]] * 3)
        idx = EmbeddingIndex.build(["c", "a", "b"], vectors)
        got = top_k(np.array([1.0, 0.0]), idx, 3)
        assert [key for key, _ in got] == ["a", "b", "c"]

    def test_zero_rows_excluded(self):
        idx = EmbeddingIndex.build(
            ["live", "dead"], np.array([[1.0, 0.0], [0.0, 0.0]])
        )
        got = top_k(np.array([1.0, 0.0]), idx, 5)
        assert got == [("live", pytest.approx(1.0))]

    def test_zero_query_scores_zero(self):
        idx = EmbeddingIndex.build(["a", "b"], np.eye(2))
        got = top_k(np.zeros(2), idx, 2)
        assert [key for key, _ in got] == ["a", "b"]  # tie broken by key
        assert all(score == 0.0 for _, score in got)

    def test_k_larger_than_index(self):
        idx = EmbeddingIndex.build(["a"], np.eye(1))
        assert len(top_k(np.ones(1), idx, 10)) == 1

    def test_invalid_k(self):
        idx = EmbeddingIndex.build(["a"], np.eye(1))
        with pytest.raises(EmbeddingError, match="k must be"):
            top_k(np.ones(1), idx, 0)

    def test_empty_index(self):
        idx = EmbeddingIndex.build([], np.zeros((0, 3)))
        with pytest.raises(EmbeddingError, match="empty"):
            top_k(np.ones(3), idx, 1)

    def test_query_dim_mismatch(self):
        idx = EmbeddingIndex.build(["a"], np.eye(2)[:1])
        with pytest.raises(DimensionMismatch):
            top_k(np.ones(3), idx, 1)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(7)
        for trial in range(30):
            n = int(rng.integers(1, 40))
            dim = int(rng.integers(2, 9))
            keys = [f"k{i:02d}" for i in range(n)]
            vectors = rng.normal(size=(n, dim))
            # Zero out some rows to exercise the exclusion rule.
            for i in range(n):
                if rng.random() < 0.15:
                    vectors[i] = 0.0
            query = rng.normal(size=dim)
            k = int(rng.integers(1, n + 3))
            idx = EmbeddingIndex.build(keys, vectors)
            got = top_k(query, idx, k)
            want = brute_force_top_k(query, keys, vectors, k)
            assert [key for key, _ in got] == [key for key, _ in want]
            for (_, gs), (_, ws) in zip(got, want):
                assert gs == pytest.approx(ws, abs=1e-9)

    def test_embed_into_index(self):
        emb = HashEmbedder(dim=64)
        idx = embed_into_index(emb, ["a", "b"], ["android", "gravity"])
        assert len(idx) == 2
        got = top_k(emb.embed(["android os"])[0], idx, 1)
        assert got[0][0] == "a"

    def test_embed_into_index_misaligned(self):
        with pytest.raises(EmbeddingError, match="align"):
            embed_into_index(HashEmbedder(dim=64), ["a"], ["x", "y"])


def _mock_embedder(handler, **kwargs):
    transport = httpx.MockTransport(handler)
    client = httpx.Client(transport=transport)
    return HttpEmbedder(base_url="http://emb.test/v1/embed", client=client, **kwargs)


class TestHttpEmbedder:
    def test_happy_path_payload_and_auth(self):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return httpx.Response(200, json={"vectors": [[1.0, 0.0], [0.0, 1.0]]})

        emb = _mock_embedder(handler, api_key="sk-test")
        got = emb.embed(["a", "b"])
        np.testing.assert_array_equal(got, np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert seen["url"] == "http://emb.test/v1/embed"
        assert seen["auth"] == "Bearer sk-test"
        assert seen["body"] == {"texts": ["a", "b"]}
        assert emb.dim == 2

    def test_retries_on_500_then_succeeds(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                return httpx.Response(500, text="boom")
            return httpx.Response(200, json={"vectors": [[1.0, 2.0]]})

        got = _mock_embedder(handler).embed(["x"])
        assert calls["n"] == 2
        np.testing.assert_array_equal(got, np.array([[1.0, 2.0]]))

    def test_gives_up_after_retries(self):
        def handler(request):
            return httpx.Response(503, text="down")

        with pytest.raises(EmbeddingError, match="503"):
            _mock_embedder(handler, retries=1).embed(["x"])

    def test_client_error_not_retried(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(401, text="no")

        with pytest.raises(EmbeddingError, match="401"):
            _mock_embedder(handler).embed(["x"])
        assert calls["n"] == 1

    def test_vector_count_mismatch(self):
        def handler(request):
            return httpx.Response(200, json={"vectors": [[1.0]]})

        with pytest.raises(EmbeddingError, match="per input text"):
            _mock_embedder(handler).embed(["a", "b"])

    def test_dimension_switch_rejected(self):
        state = {"n": 0}

        def handler(request):
            state["n"] += 1
            dim = 2 if state["n"] == 1 else 3
            return httpx.Response(200, json={"vectors": [[0.0] * dim]})

        emb = _mock_embedder(handler)
        emb.embed(["a"])
        with pytest.raises(DimensionMismatch):
            emb.embed(["b"])

    def test_requires_base_url(self, monkeypatch):
        monkeypatch.delenv("PATHTRACK_EMBEDDER_BASE_URL", raising=False)
        with pytest.raises(EmbeddingError, match="PATHTRACK_EMBEDDER_BASE_URL"):
            HttpEmbedder()

    def test_base_url_from_env(self, monkeypatch):
        monkeypatch.setenv("PATHTRACK_EMBEDDER_BASE_URL", "http://env.test/embed")

        def handler(request):
            assert str(request.url) == "http://env.test/embed"
            return httpx.Response(200, json={"vectors": [[1.0]]})

        client = httpx.Client(transport=httpx.MockTransport(handler))
        emb = HttpEmbedder(client=client)
        emb.embed(["x"])

    def test_empty_batch_no_request(self):
        def handler(request):  # pragma: no cover - must never run
            raise AssertionError("no request expected for empty batch")

        got = _mock_embedder(handler).embed([])
        assert got.shape == (0, 0)
