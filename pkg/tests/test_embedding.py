import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from topomem.embedding import (
    EmbeddingError,
    HttpEmbedder,
    StubEmbedder,
    cosine,
    descriptor_text,
    embed_descriptor,
    fnv1a_64,
    stub_embed,
    tokenize,
)


# Published FNV-1a 64-bit test vectors.
@pytest.mark.parametrize("data, expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv1a_reference_vectors(data, expected):
    assert fnv1a_64(data) == expected


def test_cosine_examples():
    assert cosine([1, 0], [1, 0]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0
    # the quoted 0.70710678 is 1/sqrt(2) truncated to 8 places (off by 1.2e-9); check the exact value
    assert cosine([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-9)
    assert cosine([1, 1], [1, 0]) == pytest.approx(0.70710678, abs=1e-8)
    assert cosine([0, 0], [1, 0]) == 0.0
    with pytest.raises(ValueError):
        cosine([1, 0], [1, 0, 0])


finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
       st.floats(1e-3, 1e3))
def test_cosine_symmetry_and_scale(a, b, lam):
    assert cosine(a, b) == cosine(b, a)
    if np.linalg.norm(a) > 1e-6 and np.linalg.norm(b) > 1e-6:
        assert abs(cosine(np.multiply(a, lam), b) - cosine(a, b)) < 1e-12


def test_tokenize_rule():
    assert tokenize("Hello, WORLD_x 42ab!") == ["hello", "world", "x", "42ab"]


def test_stub_empty_is_zero():
    v = stub_embed("")
    assert v.shape == (64,) and not v.any()


def test_stub_repetition_keeps_direction():
    assert cosine(stub_embed("hello hello"), stub_embed("hello")) == pytest.approx(1.0, abs=1e-15)


def test_stub_disjoint_tokens_orthogonal():
    buckets = {w: fnv1a_64(w.encode()) % 64 for w in ("apple", "river")}
    assert buckets["apple"] != buckets["river"]
    assert cosine(stub_embed("apple"), stub_embed("river")) == 0.0


def test_stub_bucket_counts():
    v = stub_embed("apple apple river", dim=64)
    a, r = fnv1a_64(b"apple") % 64, fnv1a_64(b"river") % 64
    expected = np.zeros(64)
    expected[a] += 2
    expected[r] += 1
    np.testing.assert_array_equal(v, expected / np.sqrt(5.0))


def test_stub_is_byte_stable():
    a = stub_embed("The quick brown fox; 123").tobytes()
    b = stub_embed("The quick brown fox; 123").tobytes()
    assert a == b


def test_descriptor_concatenation():
    assert descriptor_text("a", ["b", "c"]) == "a b c"
    emb = StubEmbedder()
    np.testing.assert_array_equal(embed_descriptor(emb, "a", ["b"]), embed_descriptor(emb, "a b", []))
    assert not embed_descriptor(emb, "", []).any()
    assert emb.calls == 3


def _transport(handler):
    return httpx.MockTransport(handler)


def test_http_embedder_request_shape(monkeypatch):
    monkeypatch.setenv("EMB_KEY", "secret")
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"data": [{"embedding": [0.5, 0.5]}, {"embedding": [1, 0]}]})

    emb = HttpEmbedder("http://x/v1/embeddings", "mini", 2, api_key_env="EMB_KEY", transport=_transport(handler))
    out = emb.embed_many(["a", "b"])
    assert seen["body"] == {"input": ["a", "b"], "model": "mini"}
    assert seen["auth"] == "Bearer secret"
    np.testing.assert_array_equal(out[1], [1.0, 0.0])
    assert emb.calls == 1


@pytest.mark.parametrize("response", [
    httpx.Response(500, text="boom"),
    httpx.Response(200, text="not json"),
    httpx.Response(200, json={"data": [{"embedding": [1, 2, 3]}]}),
    httpx.Response(200, json={"nodata": []}),
])
def test_http_embedder_failures(response):
    emb = HttpEmbedder("http://x/v1/embeddings", "mini", 2, transport=_transport(lambda r: response))
    with pytest.raises(EmbeddingError):
        emb.embed("a")
