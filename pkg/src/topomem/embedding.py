"""Embedding providers and cosine similarity.

The default provider is a deterministic hashed bag-of-tokens projection:

* text is lowercased and split into maximal runs of Unicode letters/digits
  (``[^\\W_]+``);
* each token's UTF-8 bytes are hashed with 64-bit FNV-1a
  (offset basis ``0xcbf29ce484222325``, prime ``0x100000001b3``);
* bucket ``hash % dim`` receives +1 per occurrence;
* the count vector is L2-normalized last (the zero vector stays zero).

All arithmetic before normalization is integer, so vectors are bit-identical
across runs and platforms.
"""

from __future__ import annotations

import functools
import math
import os
import re
from typing import Protocol, Sequence

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

_TOKEN_RE = re.compile(r"[^\W_]+")


class EmbeddingError(Exception):
    """Raised when an embedding backend fails or returns malformed data."""


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@functools.lru_cache(maxsize=65536)
def _bucket(token: str, dim: int) -> int:
    return fnv1a_64(token.encode("utf-8")) % dim


def stub_embed(text: str, dim: int = 64) -> np.ndarray:
    counts = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        counts[_bucket(token, dim)] += 1.0
    norm = float(np.sqrt(np.dot(counts, counts)))
    if norm > 0.0:
        counts /= norm
    return counts


def descriptor_text(summary: str, keywords: Sequence[str]) -> str:
    return summary + " " + " ".join(keywords)


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    if type(a) is not np.ndarray or a.dtype != np.float64:
        a = np.asarray(a, dtype=np.float64)
    if type(b) is not np.ndarray or b.dtype != np.float64:
        b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = math.sqrt(a.dot(a))
    nb = math.sqrt(b.dot(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    value = float(a.dot(b)) / (na * nb)
    # clamp rounding spill outside [-1, 1]
    return min(1.0, max(-1.0, value))


def cosine_from(a: np.ndarray):
    """``cosine(a, .)`` with a's norm computed once; same arithmetic, same results."""
    a = np.asarray(a, dtype=np.float64)
    na = math.sqrt(a.dot(a))

    def against(b: np.ndarray) -> float:
        if b.shape != a.shape:
            raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
        nb = math.sqrt(b.dot(b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return min(1.0, max(-1.0, float(a.dot(b)) / (na * nb)))

    return against


class StubEmbedder:
    """Deterministic offline embedder; counts calls for accounting tests."""

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim
        self.calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        return stub_embed(text, self.dim)


class HttpEmbedder:
    """Client for an OpenAI-embeddings-compatible endpoint."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        dim: int,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 30.0,
        transport=None,
    ) -> None:
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.dim = dim
        self.calls = 0
        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        import httpx

        self.calls += 1
        try:
            resp = self._client.post(self.endpoint, json={"input": list(texts), "model": self.model})
            resp.raise_for_status()
            data = resp.json()["data"]
            vectors = [np.asarray(item["embedding"], dtype=np.float64) for item in data]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise EmbeddingError(f"embedding backend failed: {exc}") from exc
        if len(vectors) != len(texts) or any(v.shape != (self.dim,) for v in vectors):
            raise EmbeddingError("embedding backend returned wrong count or dimension")
        return vectors

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def embed_descriptor(provider: EmbeddingProvider, summary: str, keywords: Sequence[str]) -> np.ndarray:
    return provider.embed(descriptor_text(summary, keywords))
