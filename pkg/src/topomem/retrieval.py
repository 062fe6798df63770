"""Three-stage retrieval: surface anchoring, typed expansion, re-ranking and materialization."""

from __future__ import annotations

import functools
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Iterable, Sequence

import numpy as np

from topomem.bank import EdgeType, MemoryBank
from topomem.embedding import EmbeddingProvider, cosine

# Expansion priority: smaller expands first.
PRIORITY: dict[EdgeType, int] = {
    EdgeType.SIBLING: 0,
    EdgeType.VERSION: 1,
    EdgeType.TEMPORAL: 2,
    EdgeType.SEMANTIC: 3,
}

Tokenizer = Callable[[str], int]


def whitespace_tokens(text: str) -> int:
    return len(text.split())


def tiktoken_counter(encoding: str = "cl100k_base") -> Tokenizer:
    import tiktoken  # optional dependency

    enc = tiktoken.get_encoding(encoding)
    return lambda text: len(enc.encode(text))


@dataclass(frozen=True)
class QueryBudget:
    k: int = 10
    L: int = 40
    H_q: int = 2
    K: int = 16
    token_budget: int = 2048

    def __post_init__(self) -> None:
        for name in ("k", "L", "K", "token_budget"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.H_q < 0:
            raise ValueError("H_q must be non-negative")
        if self.K > self.L + self.k:
            raise ValueError("K must not exceed L + k")


# ------------------------------------------------------------------ stage 1


def cosine_scores(matrix: np.ndarray, norms: np.ndarray, query: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    qn = float(np.sqrt(np.dot(q, q)))
    dots = matrix @ q
    denom = norms * qn
    scores = np.zeros(len(dots))
    ok = denom > 0.0
    scores[ok] = dots[ok] / denom[ok]
    return np.clip(scores, -1.0, 1.0)


def top_k_indices(matrix: np.ndarray, norms: np.ndarray, query: np.ndarray, k: int) -> list[int]:
    """Exact top-k row indices by cosine; ties go to the lower row index."""
    n = matrix.shape[0]
    if n == 0 or k <= 0:
        return []
    scores = cosine_scores(matrix, norms, query)
    if k >= n:
        pool = np.arange(n)
    else:
        part = np.argpartition(-scores, k - 1)[:k]
        # pull in every row tied with the k-th value so the tie-break is exact
        threshold = scores[part].min()
        pool = np.flatnonzero(scores >= threshold)
    order = np.lexsort((pool, -scores[pool]))
    return [int(i) for i in pool[order[:k]]]


def anchor(bank: MemoryBank, query_vec: np.ndarray, k: int) -> list[tuple[int, float]]:
    ids, matrix, norms = bank.surface_index()
    if not ids:
        return []
    picked = top_k_indices(matrix, norms, query_vec, k)
    scores = cosine_scores(matrix[picked], norms[picked], query_vec)
    return [(ids[i], float(s)) for i, s in zip(picked, scores)]


# ------------------------------------------------------------------ stage 2


def sorted_out_neighbors(bank: MemoryBank, u: int) -> list[tuple[int, EdgeType]]:
    pairs = bank.out_neighbors(u)
    pairs.sort(key=lambda pair: (PRIORITY[pair[1]], pair[0]))
    return pairs


def expand(
    bank: MemoryBank,
    anchors: Sequence[int],
    H_q: int,
    L: int,
    edge_types: Iterable[EdgeType] | None = None,
) -> list[int]:
    """Hop- and budget-bounded BFS over outgoing typed edges.

    Returns candidates in admission order (anchors first). Archived units are
    admissible; that is how superseded evidence gets recovered.
    """
    allowed = None if edge_types is None else set(edge_types)
    # anchors seed the candidate set but still count against L
    candidates = list(dict.fromkeys(anchors))[:L]
    seen = set(candidates)
    frontier = list(candidates)
    for _ in range(H_q):
        if len(candidates) >= L or not frontier:
            break
        nxt = []
        for u in frontier:
            if len(candidates) >= L:
                break
            for v, et in sorted_out_neighbors(bank, u):
                if len(candidates) >= L:
                    break
                if allowed is not None and et not in allowed:
                    continue
                if v in seen:
                    continue
                seen.add(v)
                candidates.append(v)
                nxt.append(v)
        frontier = nxt
    return candidates


# ------------------------------------------------------------------ stage 3


def rank(bank: MemoryBank, query_vec: np.ndarray, candidates: Iterable[int]) -> list[tuple[int, float]]:
    scored = [(c, cosine(query_vec, bank.unit(c).embedding)) for c in set(candidates)]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


def aggregate_sources(bank: MemoryBank, ranked: Sequence[tuple[int, float]], k: int) -> list[str]:
    best: dict[str, float] = {}
    first: dict[str, int] = {}
    for pos, (uid, score) in enumerate(ranked):
        for src in bank.unit(uid).source_ids:
            if src not in best or score > best[src]:
                best[src] = score
            first.setdefault(src, pos)
    ordered = sorted(best, key=lambda s: (-best[s], first[s], s))
    return ordered[:k]


@functools.lru_cache(maxsize=65536)
def format_timestamp(t: float) -> str:
    dt = datetime.fromtimestamp(t, tz=timezone.utc)
    return dt.isoformat().replace("+00:00", "Z")


def block(bank: MemoryBank, uid: int) -> str:
    u = bank.unit(uid)
    if u.timestamp is None:
        return u.evidence
    return f"[{format_timestamp(u.timestamp)}] {u.evidence}"


def materialize(
    bank: MemoryBank,
    ranked: Sequence[tuple[int, float]],
    K: int,
    token_budget: int,
    tokenizer: Tokenizer = whitespace_tokens,
) -> tuple[str, list[int]]:
    """Build the context string; returns (text, included unit ids in block order)."""
    chosen = [uid for uid, _ in ranked[:K]]

    def order_key(uid: int) -> tuple:
        t = bank.unit(uid).timestamp
        return (t is None, 0.0 if t is None else t, uid)

    chosen.sort(key=order_key)
    text = ""
    included: list[int] = []
    for uid in chosen:
        candidate = block(bank, uid) if not included else text + "\n\n" + block(bank, uid)
        if tokenizer(candidate) > token_budget:
            break
        text = candidate
        included.append(uid)
    return text, included


def serialize_evidence(bank: MemoryBank, unit_ids: Sequence[int]) -> str:
    """One '[UNIT_ID] [TIMESTAMP] [UNIT_TYPE] [TEXT]' line per unit, N/A for missing fields."""
    lines = []
    for uid in unit_ids:
        u = bank.unit(uid)
        ts = format_timestamp(u.timestamp) if u.timestamp is not None else "N/A"
        kind = u.unit_type.value if u.unit_type else "N/A"
        lines.append(f"[{uid}] [{ts}] [{kind}] [{u.evidence}]")
    return "\n".join(lines)


# ----------------------------------------------------------------- pipeline


@dataclass
class QueryResult:
    context_text: str
    ranked_source_ids: list[str]
    latencies_ms: dict[str, float]
    anchors: list[tuple[int, float]] = field(default_factory=list)
    candidates: list[int] = field(default_factory=list)
    ranked: list[tuple[int, float]] = field(default_factory=list)
    included: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "context_text": self.context_text,
            "ranked_source_ids": self.ranked_source_ids,
            "latencies_ms": self.latencies_ms,
            "anchors": [uid for uid, _ in self.anchors],
            "candidates": self.candidates,
            "included": self.included,
        }


def query(
    bank: MemoryBank,
    text: str,
    embedder: EmbeddingProvider,
    budget: QueryBudget = QueryBudget(),
    tokenizer: Tokenizer = whitespace_tokens,
) -> QueryResult:
    clock = time.perf_counter
    t0 = clock()
    qvec = embedder.embed(text)
    t1 = clock()
    anchors = anchor(bank, qvec, budget.k)
    t2 = clock()
    candidates = expand(bank, [a for a, _ in anchors], budget.H_q, budget.L)
    t3 = clock()
    ranked = rank(bank, qvec, candidates)
    sources = aggregate_sources(bank, ranked, budget.k)
    t4 = clock()
    context, included = materialize(bank, ranked, budget.K, budget.token_budget, tokenizer)
    t5 = clock()
    ms = lambda a, b: (b - a) * 1000.0  # noqa: E731
    latencies = {
        "embed": ms(t0, t1),
        "anchor": ms(t1, t2),
        "expand": ms(t2, t3),
        "rank": ms(t3, t4),
        "materialize": ms(t4, t5),
        "total": ms(t0, t5),
    }
    return QueryResult(context, sources, latencies, anchors, candidates, ranked, included)
