"""Backend gateway for diagnosis, planning and online descriptors.

Every request is rendered from a fixed prompt asset, sent to a backend, and the
raw reply is parsed strictly against a JSON schema. Backends only produce text;
they never see the bank. The stub backend derives its reply from the
structured payload with fixed rules so runs are reproducible offline.
"""

from __future__ import annotations

import functools
import json
import os
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Protocol, Sequence

import numpy as np

from topomem.embedding import cosine, tokenize
from topomem.schemas import SCHEMAS, DocumentError, parse_document

TEMPLATE_IDS = ("diag", "plan_split", "plan_merge", "plan_update", "descriptor")
_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}|<([a-z_]+)>")

SPLIT_MARKER = "\n---\n"
REVISED_MARKER = "[REVISED]"
STUB_CONFIDENCE = 0.95
STUB_MERGE_COSINE = 0.95


class GatewayError(Exception):
    """Template or configuration problem (a programming error, not a backend failure)."""


class BackendError(Exception):
    """Transport-level failure talking to a backend."""


# ---------------------------------------------------------------- templates


_TEMPLATE_CACHE: dict[str, str] = {}


def template(template_id: str) -> str:
    if template_id not in TEMPLATE_IDS:
        raise GatewayError(f"unknown template {template_id!r}")
    if template_id not in _TEMPLATE_CACHE:
        path = resources.files("topomem").joinpath("prompts", f"{template_id}.txt")
        _TEMPLATE_CACHE[template_id] = path.read_text(encoding="utf-8")
    return _TEMPLATE_CACHE[template_id]


def placeholders(template_id: str) -> list[str]:
    return list(_placeholders(template_id))


@functools.lru_cache(maxsize=None)
def _placeholders(template_id: str) -> tuple[str, ...]:
    names = []
    for m in _PLACEHOLDER_RE.finditer(template(template_id)):
        name = m.group(1) or m.group(2)
        if name not in names:
            names.append(name)
    return tuple(names)


def render(template_id: str, bindings: dict[str, str]) -> str:
    """Substitute ``{name}`` / ``<name>`` tokens in one pass; extra bindings are ignored."""
    text = template(template_id)
    missing = [n for n in placeholders(template_id) if n not in bindings]
    if missing:
        raise GatewayError(f"unbound placeholders for {template_id}: {', '.join(missing)}")

    def sub(m: re.Match) -> str:
        return str(bindings[m.group(1) or m.group(2)])

    return _PLACEHOLDER_RE.sub(sub, text)


# ----------------------------------------------------------------- contexts


@dataclass(frozen=True)
class ContextNode:
    """A dereferenced view of one unit as the backend sees it."""

    node_id: int
    evidence: str
    summary: str
    keywords: tuple[str, ...]
    timestamp: float | None
    source_ids: tuple[str, ...]
    embedding: np.ndarray = field(compare=False, repr=False)
    visible: bool = True

    def descriptor_record(self) -> dict:
        return {
            "node_id": str(self.node_id),
            "summary": self.summary,
            "keywords": list(self.keywords),
            "timestamp": _iso(self.timestamp),
        }


@dataclass(frozen=True)
class DiagnosisContext:
    target: ContextNode
    anchors: tuple[ContextNode, ...]


@dataclass(frozen=True)
class PlanRequest:
    op: str
    nodes: tuple[ContextNode, ...]  # SPLIT: (v,)  MERGE: sources  UPDATE: (u, v)
    anchors: tuple[ContextNode, ...] = ()
    reason: str = ""


def _iso(t: float | None) -> str:
    if t is None:
        return "N/A"
    from topomem.retrieval import format_timestamp

    return format_timestamp(t)


def _dump(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def diagnosis_bindings(ctx: DiagnosisContext) -> dict[str, str]:
    target = ctx.target.descriptor_record()
    target["evidence"] = ctx.target.evidence
    return {
        "context_text": "\n".join(_dump(a.descriptor_record()) for a in ctx.anchors),
        "target_info": _dump(target),
    }


def plan_bindings(req: PlanRequest) -> dict[str, str]:
    if req.op == "SPLIT":
        return {"original_text": req.nodes[0].evidence, "reason": req.reason}
    if req.op == "MERGE":
        return {"merged_content": "\n\n".join(n.evidence for n in req.nodes), "reason": req.reason}
    u, v = req.nodes
    return {
        "u_evidence": u.evidence,
        "u_old_summary": u.summary,
        "u_old_keywords": _dump(list(u.keywords)),
        "v_evidence": v.evidence,
        "anchors": "[\n" + ",\n".join("  " + _dump(a.descriptor_record()) for a in req.anchors) + "\n]",
        "reason": req.reason,
    }


PLAN_TEMPLATES = {"SPLIT": "plan_split", "MERGE": "plan_merge", "UPDATE": "plan_update"}


# -------------------------------------------------------------- stub rules


def stub_keywords(text: str, limit: int = 8) -> list[str]:
    """Most frequent tokens of 4+ chars, ties by first occurrence."""
    tokens = [t for t in tokenize(text) if len(t) >= 4]
    counts = Counter(tokens)
    first = {}
    for i, t in enumerate(tokens):
        first.setdefault(t, i)
    return sorted(counts, key=lambda t: (-counts[t], first[t]))[:limit]


def stub_descriptor(evidence: str) -> dict:
    return {"summary": evidence[:200], "keywords": stub_keywords(evidence)}


def _strip_revised(evidence: str) -> str | None:
    body = evidence.rstrip()
    if not body.endswith(REVISED_MARKER):
        return None
    return body[: -len(REVISED_MARKER)].rstrip()


def stub_diagnose(ctx: DiagnosisContext) -> dict:
    doc: dict[str, list] = {"split_tasks": [], "merge_tasks": [], "update_tasks": []}
    target = ctx.target
    if SPLIT_MARKER in target.evidence:
        doc["split_tasks"].append(
            {"node_id": str(target.node_id), "reason": "separator marker", "confidence": STUB_CONFIDENCE}
        )
    nodes = [target] + [a for a in ctx.anchors if a.node_id != target.node_id]
    for i in range(len(nodes)):
        for j in range(i + 1, len(nodes)):
            a, b = nodes[i], nodes[j]
            if a.source_ids != b.source_ids:
                continue
            if cosine(a.embedding, b.embedding) >= STUB_MERGE_COSINE:
                doc["merge_tasks"].append(
                    {
                        "node_ids": [str(a.node_id), str(b.node_id)],
                        "reason": "near-duplicate descriptors",
                        "confidence": STUB_CONFIDENCE,
                    }
                )
    base = _strip_revised(target.evidence)
    if base is not None:
        for a in nodes[1:]:
            if a.evidence.rstrip() == base:
                doc["update_tasks"].append(
                    {
                        "old_node_id": str(a.node_id),
                        "new_node_id": "TARGET",
                        "reason": "revised restatement",
                        "confidence": STUB_CONFIDENCE,
                    }
                )
    return doc


def _keywords_or_fallback(text: str, fallback: str) -> list[str]:
    kws = stub_keywords(text)
    if not kws:
        kws = list(dict.fromkeys(tokenize(text)))[:8]
    return kws or [fallback]


def _segment(text: str) -> dict:
    return {
        "segment_text": text,
        "segment_summary": text.strip()[:80],
        "segment_keywords": _keywords_or_fallback(text, "segment"),
        "topic_label": "segment",
    }


def stub_plan(req: PlanRequest) -> dict:
    if req.op == "SPLIT":
        evidence = req.nodes[0].evidence
        parts = [p for p in evidence.split(SPLIT_MARKER) if p.strip()]
        if len(parts) < 2:
            whole = _segment(evidence)
            if not whole["segment_summary"]:
                whole["segment_summary"] = "empty"
            return {"do_split": False, "segments": [whole], "split_rationale": "single topic"}
        return {"do_split": True, "segments": [_segment(p) for p in parts], "split_rationale": "separator marker"}
    if req.op == "MERGE":
        summaries = list(dict.fromkeys(n.summary.strip() for n in req.nodes if n.summary.strip()))
        summary = " ".join(summaries)
        keywords: list[str] = []
        for n in req.nodes:
            for kw in n.keywords:
                kw = kw.strip()
                if kw and kw not in keywords and len(keywords) < 16:
                    keywords.append(kw)
        if not summary:
            summary = " ".join(n.evidence.strip() for n in req.nodes)[:200].strip() or "merged"
        if not keywords:
            keywords = _keywords_or_fallback(summary, "merged")
        return {"summary": summary, "keywords": keywords, "salient_points": summaries}
    if req.op == "UPDATE":
        u = req.nodes[0]
        body = _strip_revised(u.evidence)
        text = u.evidence if body is None else body
        summary = text[:200].strip() or "updated"
        return {
            "updated_summary": summary,
            "updated_keywords": _keywords_or_fallback(text, "updated"),
            "deprecations": [],
            "alignment_note": "stub refresh",
        }
    raise GatewayError(f"unknown operator {req.op!r}")


# ----------------------------------------------------------------- backends


class Backend(Protocol):
    def complete(self, schema_id: str, prompt: str, payload: Any) -> tuple[str, dict]:
        """Return (raw reply text, usage dict)."""
        ...


class StubBackend:
    """Rule engine keyed by schema id. Usage is synthetic: whitespace token counts."""

    def complete(self, schema_id: str, prompt: str, payload: Any) -> tuple[str, dict]:
        if schema_id == "diag":
            doc = stub_diagnose(payload)
        elif schema_id == "descriptor":
            doc = stub_descriptor(payload)
        else:
            doc = stub_plan(payload)
        raw = _dump(doc)
        return raw, {"prompt_tokens": len(prompt.split()), "completion_tokens": len(raw.split())}


class HttpChatBackend:
    """Chat-completions-compatible client: one POST per call, temperature 0, no retries."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key_env: str = "OPENAI_API_KEY",
        timeout: float = 60.0,
        transport=None,
    ) -> None:
        import httpx

        headers = {}
        key = os.environ.get(api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.endpoint = endpoint
        self.model = model
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def request_body(self, schema_id: str, prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
            "response_format": {
                "type": "json_schema",
                "json_schema": {"name": schema_id, "schema": SCHEMAS[schema_id], "strict": True},
            },
        }

    def complete(self, schema_id: str, prompt: str, payload: Any) -> tuple[str, dict]:
        import httpx

        try:
            resp = self._client.post(self.endpoint, json=self.request_body(schema_id, prompt))
            resp.raise_for_status()
            body = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise BackendError(str(exc)) from exc
        try:
            raw = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            # a reply without the expected envelope is a malformed document, not a transport error
            raw = ""
        usage = body.get("usage") if isinstance(body, dict) else None
        usage = usage if isinstance(usage, dict) else {}
        return raw if isinstance(raw, str) else "", {
            "prompt_tokens": int(usage.get("prompt_tokens", 0) or 0),
            "completion_tokens": int(usage.get("completion_tokens", 0) or 0),
        }


@dataclass(frozen=True)
class BackendConfig:
    mode: str = "stub"  # stub | http
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    temperature: float = 0.0
    retries: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("stub", "http"):
            raise GatewayError(f"unknown backend mode {self.mode!r}")
        if self.temperature != 0.0 or self.retries != 0:
            raise GatewayError("temperature must be 0 and retries must be 0")
        if self.mode == "http" and not (self.endpoint and self.model):
            raise GatewayError("http backend needs endpoint and model")

    def build(self, transport=None) -> Backend:
        if self.mode == "stub":
            return StubBackend()
        return HttpChatBackend(self.endpoint, self.model, self.api_key_env, self.timeout, transport)


# ------------------------------------------------------------------ gateway


@dataclass
class CallResult:
    schema_id: str
    doc: dict | None
    code: str | None  # None on success, else JSON_PARSE_FAIL / SCHEMA_FAIL
    detail: str
    raw: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float

    @property
    def ok(self) -> bool:
        return self.doc is not None


class Gateway:
    """Renders prompts, calls the backend once, parses fail-closed. Thread-safe."""

    def __init__(self, backend: Backend | None = None) -> None:
        self.backend = backend or StubBackend()
        self._lock = threading.Lock()
        self.calls: Counter[str] = Counter()
        self.tokens: Counter[str] = Counter()

    def call(self, schema_id: str, prompt: str, payload: Any = None) -> CallResult:
        start = time.perf_counter()
        usage: dict = {}
        raw = ""
        try:
            raw, usage = self.backend.complete(schema_id, prompt, payload)
            doc = parse_document(raw, schema_id)
            code, detail = None, ""
        except BackendError as exc:
            doc, code, detail = None, "JSON_PARSE_FAIL", f"backend failure: {exc}"
        except DocumentError as exc:
            doc, code, detail = None, exc.code, exc.detail
        elapsed = time.perf_counter() - start
        pt = int(usage.get("prompt_tokens", 0))
        ct = int(usage.get("completion_tokens", 0))
        with self._lock:
            self.calls[schema_id] += 1
            self.tokens[schema_id] += pt + ct
        return CallResult(schema_id, doc, code, detail, raw, pt, ct, elapsed)

    def diagnose(self, ctx: DiagnosisContext) -> CallResult:
        return self.call("diag", render("diag", diagnosis_bindings(ctx)), ctx)

    def plan(self, req: PlanRequest) -> CallResult:
        tid = PLAN_TEMPLATES[req.op]
        return self.call(tid, render(tid, plan_bindings(req)), req)

    def describe(self, evidence: str) -> CallResult:
        return self.call("descriptor", render("descriptor", {"evidence": evidence}), evidence)


def make_gateway(config: BackendConfig, transport=None) -> Gateway:
    return Gateway(config.build(transport))


def context_node(bank, uid: int) -> ContextNode:
    u = bank.unit(uid)
    return ContextNode(uid, u.evidence, u.summary, tuple(u.keywords), u.timestamp,
                       tuple(u.source_ids), u.embedding, u.visible)


def total_tokens(results: Sequence[CallResult]) -> int:
    return sum(r.prompt_tokens + r.completion_tokens for r in results)
