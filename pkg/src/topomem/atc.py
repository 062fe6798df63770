"""Online writing and offline topology consolidation.

Consolidation dereferences the buffer into local contexts, diagnoses each one,
gates and normalizes the resulting proposals, routes them into per-operator
queues, then executes SPLIT, MERGE and UPDATE serially. Every proposal ends in
exactly one reason code, recorded in the audit log.
"""

from __future__ import annotations

import itertools
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from topomem.audit import AuditLog
from topomem.bank import ConsolidationBuffer, EdgeType, MemoryBank, TypedEdge
from topomem.embedding import EmbeddingError, EmbeddingProvider, cosine, embed_descriptor
from topomem.executor import (
    APPLIED,
    ExecutorConfig,
    apply_plan,
    parse_plan,
    surface_top_k,
    top_cap,
)
from topomem.gateway import (
    CallResult,
    DiagnosisContext,
    Gateway,
    PlanRequest,
    context_node,
)
from topomem.schemas import DocumentError

log = logging.getLogger(__name__)

OPS = ("SPLIT", "MERGE", "UPDATE")
_ID_RE = re.compile(r"^(0|[1-9][0-9]*)$")


@dataclass(frozen=True)
class GateThresholds:
    theta: tuple[tuple[str, float], ...] = (("SPLIT", 0.9), ("MERGE", 0.9), ("UPDATE", 0.9))
    gamma_merge: float = 0.7

    def __post_init__(self) -> None:
        for op, value in self.theta:
            if op not in OPS or not 0.0 <= value <= 1.0:
                raise ValueError(f"bad threshold {op}={value}")
        if not 0.0 <= self.gamma_merge <= 1.0:
            raise ValueError("gamma_merge must be in [0, 1]")

    def for_op(self, op: str) -> float:
        return dict(self.theta)[op]

    @classmethod
    def uniform(cls, theta: float = 0.9, gamma_merge: float = 0.7) -> GateThresholds:
        return cls(tuple((op, theta) for op in OPS), gamma_merge)


@dataclass(frozen=True)
class Proposal:
    op: str
    raw_ids: tuple[str, ...]  # as written by the diagnoser
    ids: tuple[int | None, ...]  # resolved ids; None for unparseable
    confidence: float
    reason: str = ""
    context: int = 0  # buffer position of the originating context


@dataclass
class Routed:
    proposal: Proposal
    target: tuple[int, ...]
    coh: float | None = None


@dataclass
class Outcome:
    op: str
    target: list
    confidence: float | None
    reason: str
    detail: str = ""
    plan: dict | None = None
    edit: dict | None = None


# ------------------------------------------------------------ dereference


def dereference_buffer(bank: MemoryBank, buffer: ConsolidationBuffer) -> list[DiagnosisContext]:
    contexts = []
    for uid, anchors in buffer:
        if uid not in bank:
            continue
        nodes = tuple(context_node(bank, a) for a in anchors if a in bank)
        contexts.append(DiagnosisContext(context_node(bank, uid), nodes))
    return contexts


# ------------------------------------------------------------- proposals


def _resolve(raw: str, target: int) -> int | None:
    if raw == "TARGET":
        return target
    return int(raw) if _ID_RE.match(raw) else None


def map_diagnosis(doc: dict, target: int, context: int = 0) -> list[Proposal]:
    """Turn a schema-valid diagnosis document into proposals.

    Raises DocumentError(SCHEMA_FAIL) if any confidence lies outside [0, 1].
    """
    out = []
    for task in doc["split_tasks"]:
        out.append(("SPLIT", (task["node_id"],), task))
    for task in doc["merge_tasks"]:
        out.append(("MERGE", tuple(task["node_ids"]), task))
    for task in doc["update_tasks"]:
        out.append(("UPDATE", (task["new_node_id"], task["old_node_id"]), task))
    proposals = []
    for op, raw, task in out:
        p = float(task["confidence"])
        if not 0.0 <= p <= 1.0:
            raise DocumentError("SCHEMA_FAIL", f"confidence {p} outside [0, 1]")
        ids = tuple(_resolve(r, target) for r in raw)
        proposals.append(Proposal(op, raw, ids, p, task["reason"], context))
    return proposals


def gate(proposal: Proposal, thresholds: GateThresholds) -> bool:
    return proposal.confidence >= thresholds.for_op(proposal.op)


def coherence(bank: MemoryBank, ids: Sequence[int]) -> float:
    """Mean pairwise cosine of current embeddings."""
    pairs = list(itertools.combinations(ids, 2))
    if not pairs:
        return 0.0
    return float(np.mean([cosine(bank.unit(a).embedding, bank.unit(b).embedding) for a, b in pairs]))


def normalize(proposal: Proposal, bank: MemoryBank, gamma: float) -> Routed | tuple[str, str]:
    """Canonical target, or (reason code, detail) when dropped."""
    op = proposal.op
    present = [i for i in proposal.ids if i is not None and i in bank]
    missing = len(present) < len(proposal.ids)
    if op == "UPDATE":
        if missing:
            return "NORM_FILTER", "unknown id"
        new, old = proposal.ids
        if not bank.unit(new).visible:
            return "VISIBILITY_FAIL", "current unit is archived"
        if new == old:
            return "ARITY_FAIL", "current and superseded are the same unit"
        return Routed(proposal, (new, old))
    ids = tuple(sorted(set(present)))
    if not ids:
        return "NORM_FILTER", "unknown id"
    if any(not bank.unit(i).visible for i in ids):
        return "VISIBILITY_FAIL", "source is archived"
    if op == "SPLIT":
        return Routed(proposal, ids)
    if not 2 <= len(ids) <= 4:
        return ("NORM_FILTER" if missing else "ARITY_FAIL"), f"{len(ids)} distinct sources"
    coh = coherence(bank, ids)
    if coh < gamma:
        return "COH_FAIL", f"coherence {coh:.4f} < {gamma}"
    return Routed(proposal, ids, coh)


def route(entries: Sequence[Routed]) -> tuple[list[Routed], list[tuple[Routed, str]]]:
    """Dedupe one operator's queue and (for merges) resolve overlapping sets.

    Returns (kept in insertion order, [(loser, detail)]).
    """
    best: dict[tuple[int, ...], Routed] = {}
    losers: list[tuple[Routed, str]] = []
    for e in entries:
        cur = best.get(e.target)
        if cur is None:
            best[e.target] = e
        elif e.proposal.confidence > cur.proposal.confidence:
            losers.append((cur, "duplicate target with lower confidence"))
            best[e.target] = e
        else:
            losers.append((e, "duplicate target with lower or equal confidence"))
    kept = [e for e in entries if best.get(e.target) is e]
    if kept and kept[0].proposal.op == "MERGE":
        ranked = sorted(kept, key=lambda e: (-e.coh, -e.proposal.confidence, e.target))
        claimed: set[int] = set()
        winners = set()
        for e in ranked:
            if claimed.isdisjoint(e.target):
                claimed.update(e.target)
                winners.add(id(e))
            else:
                losers.append((e, "overlaps a merge set with higher priority"))
        kept = [e for e in kept if id(e) in winners]
    return kept, losers


def applicable(op: str, target: Sequence[int], bank: MemoryBank, touched: set[int], gamma: float) -> tuple[str, str] | None:
    """None when the target may be edited now, else (reason code, detail)."""
    if any(t not in bank for t in target):
        return "MISSING_ID", "target id no longer exists"
    hit = sorted(touched.intersection(target))
    if hit:
        return "TOUCHED_CONFLICT", f"touched earlier this run: {hit}"
    if op == "UPDATE":
        if len(target) != 2 or target[0] == target[1]:
            return "APPLICABLE_FAIL", "bad update pair"
        if not bank.unit(target[0]).visible:
            return "APPLICABLE_FAIL", "current unit is archived"
        return None
    if any(not bank.unit(t).visible for t in target):
        return "APPLICABLE_FAIL", "source is archived"
    if op == "SPLIT" and len(target) != 1:
        return "APPLICABLE_FAIL", "split needs exactly one target"
    if op == "MERGE":
        if not 2 <= len(target) <= 4:
            return "APPLICABLE_FAIL", "merge arity"
        coh = coherence(bank, target)
        if coh < gamma:
            return "COH_FAIL", f"coherence {coh:.4f} < {gamma} on recheck"
    return None


# -------------------------------------------------------------- execution


def plan_request(bank: MemoryBank, op: str, target: Sequence[int], reason: str, k: int) -> PlanRequest:
    nodes = tuple(context_node(bank, t) for t in target)
    anchors: tuple = ()
    if op == "UPDATE":
        u = bank.unit(target[0])
        ids = surface_top_k(bank, u.embedding, k, exclude=target)
        anchors = tuple(context_node(bank, a) for a in ids)
    return PlanRequest(op, nodes, anchors, reason)


def reindex(bank: MemoryBank, embedder: EmbeddingProvider) -> list[int]:
    """Re-embed stale units, then rebuild the surface index.

    All vectors are computed before any is installed, so a provider failure
    leaves the bank and its index as they were.
    """
    stale = sorted(bank.stale)
    vectors = [embed_descriptor(embedder, bank.unit(u).summary, bank.unit(u).keywords) for u in stale]
    for uid, vec in zip(stale, vectors):
        bank.set_embedding(uid, vec)
    bank.invalidate_index()
    bank.surface_index()
    return stale


@dataclass
class RunReport:
    run: int
    contexts: int
    proposals: int
    outcomes: list[Outcome] = field(default_factory=list)
    reembedded: list[int] = field(default_factory=list)
    latency_s: float = 0.0
    tokens: int = 0
    calls: int = 0

    @property
    def applied(self) -> list[Outcome]:
        return [o for o in self.outcomes if o.reason == APPLIED]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for o in self.outcomes:
            out[o.reason] = out.get(o.reason, 0) + 1
        return out

    def to_record(self) -> dict:
        return {
            "run": self.run,
            "contexts": self.contexts,
            "proposals": self.proposals,
            "applied": len(self.applied),
            "counts": dict(sorted(self.counts().items())),
            "reembedded": self.reembedded,
        }


def _diagnose_all(gateway: Gateway, contexts: list[DiagnosisContext], workers: int) -> list[CallResult]:
    if workers > 1 and len(contexts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            # map() yields in submission order, so routing input stays deterministic
            return list(pool.map(gateway.diagnose, contexts))
    return [gateway.diagnose(c) for c in contexts]


def consolidate(
    bank: MemoryBank,
    buffer: ConsolidationBuffer,
    gateway: Gateway,
    embedder: EmbeddingProvider,
    thresholds: GateThresholds = GateThresholds(),
    cfg: ExecutorConfig = ExecutorConfig(),
    audit: AuditLog | None = None,
    workers: int = 1,
    trigger: str = "manual",
) -> RunReport:
    start = time.perf_counter()
    audit = audit if audit is not None else AuditLog()
    run = audit.run
    audit.emit("consolidate", buffer_size=len(buffer), trigger=trigger, executor=cfg.to_record(),
               thresholds={"theta": dict(thresholds.theta), "gamma_merge": thresholds.gamma_merge})
    contexts = dereference_buffer(bank, buffer)
    results = _diagnose_all(gateway, contexts, workers)
    report = RunReport(run, len(contexts), 0)
    calls = list(results)

    def record(o: Outcome) -> None:
        report.outcomes.append(o)
        audit.emit("decision", op=o.op, target=o.target, confidence=o.confidence,
                   reason=o.reason, detail=o.detail, plan=o.plan, edit=o.edit)

    proposals: list[Proposal] = []
    for pos, (ctx, res) in enumerate(zip(contexts, results)):
        if not res.ok:
            record(Outcome("DIAG", [ctx.target.node_id], None, res.code, res.detail))
            continue
        try:
            proposals.extend(map_diagnosis(res.doc, ctx.target.node_id, pos))
        except DocumentError as exc:
            record(Outcome("DIAG", [ctx.target.node_id], None, exc.code, exc.detail))

    report.proposals = len(proposals)
    # every queue is routed against the pre-run bank before any edit executes
    # every queue is routed against the pre-run bank; drops are held back so the
    # log stays ordered by operator rank
    queues: dict[str, list[Routed]] = {}
    dropped: dict[str, list[Outcome]] = {}
    for op in OPS:
        routed: list[Routed] = []
        drops = dropped[op] = []
        for p in (p for p in proposals if p.op == op):
            if not gate(p, thresholds):
                drops.append(Outcome(op, list(p.raw_ids), p.confidence, "LOW_CONF",
                                     f"p={p.confidence} < {thresholds.for_op(op)}"))
                continue
            norm = normalize(p, bank, thresholds.gamma_merge)
            if isinstance(norm, Routed):
                routed.append(norm)
            else:
                drops.append(Outcome(op, list(p.raw_ids), p.confidence, norm[0], norm[1]))
        queue, losers = route(routed)
        pos = {id(e): i for i, e in enumerate(routed)}
        for loser, detail in sorted(losers, key=lambda x: pos[id(x[0])]):
            drops.append(Outcome(op, list(loser.target), loser.proposal.confidence, "NORM_FILTER", detail))
        queues[op] = queue

    touched: set[int] = set()
    for op in OPS:
        for o in dropped[op]:
            record(o)
        for entry in queues[op]:
            target = list(entry.target)
            conf = entry.proposal.confidence
            blocked = applicable(op, target, bank, touched, thresholds.gamma_merge)
            if blocked:
                record(Outcome(op, target, conf, blocked[0], blocked[1]))
                continue
            req = plan_request(bank, op, target, entry.proposal.reason, cfg.anchor_k)
            res = gateway.plan(req)
            calls.append(res)
            if not res.ok:
                record(Outcome(op, target, conf, res.code, res.detail))
                continue
            plan = parse_plan(op, res.doc)
            try:
                summary = apply_plan(bank, op, target, plan, embedder, cfg)
            except EmbeddingError as exc:
                record(Outcome(op, target, conf, "JSON_PARSE_FAIL", f"embedding backend failure: {exc}", res.doc))
                continue
            if summary.status == APPLIED:
                touched |= summary.touched()
                record(Outcome(op, target, conf, APPLIED, "", res.doc, summary.to_record()))
            else:
                record(Outcome(op, target, conf, summary.status, summary.reason, res.doc))

    report.reembedded = reindex(bank, embedder)
    buffer.clear()
    audit.emit("run_end", digest=bank.digest(), counts=dict(sorted(report.counts().items())))
    audit.close_run()
    report.latency_s = time.perf_counter() - start
    report.tokens = sum(r.prompt_tokens + r.completion_tokens for r in calls)
    report.calls = len(calls)
    return report


# ----------------------------------------------------------------- online


@dataclass
class WriteResult:
    unit: int
    anchors: list[int]
    edges: list[list]
    degraded: bool
    tokens: int
    latency_s: float


def _online_edges(bank: MemoryBank, uid: int, prev: int | None, k: int) -> tuple[list[int], list[list]]:
    added: list[TypedEdge] = []
    unit = bank.unit(uid)
    if prev is not None and prev in bank:
        # top_cap drops the predecessor when both timestamps exist and it is not strictly older
        if bank.unit(prev).visible:
            for dst in top_cap(bank, uid, EdgeType.TEMPORAL, [prev]):
                if bank.add_edge(uid, dst, EdgeType.TEMPORAL):
                    added.append(TypedEdge(uid, dst, EdgeType.TEMPORAL))
    anchors = surface_top_k(bank, unit.embedding, k, exclude=(uid,))
    for dst in top_cap(bank, uid, EdgeType.SEMANTIC, anchors):
        if bank.add_edge(uid, dst, EdgeType.SEMANTIC):
            added.append(TypedEdge(uid, dst, EdgeType.SEMANTIC))
    added.sort(key=lambda e: (e.src, e.dst, e.edge_type.value))
    return anchors, [[e.src, e.dst, e.edge_type.value] for e in added]


def write_online(
    bank: MemoryBank,
    buffer: ConsolidationBuffer,
    evidence: str,
    timestamp: float | None,
    gateway: Gateway,
    embedder: EmbeddingProvider,
    k: int = 10,
    prev: int | None = None,
    source_ids: Sequence[str] = (),
    audit: AuditLog | None = None,
    session_id: str | None = None,
) -> WriteResult:
    start = time.perf_counter()
    res = gateway.describe(evidence)
    degraded = not res.ok
    if degraded:
        log.warning("descriptor backend failed (%s); storing degraded descriptor", res.code)
        summary, keywords = evidence[:200], []
    else:
        summary, keywords = res.doc["summary"], list(res.doc["keywords"])
    vector = embed_descriptor(embedder, summary, keywords)
    uid = bank.create_unit(evidence, summary, keywords, vector, timestamp, source_ids=source_ids)
    anchors, edges = _online_edges(bank, uid, prev, k)
    buffer.push(uid, anchors)
    if audit is not None:
        audit.emit("write", unit=uid, evidence=evidence, timestamp=bank.unit(uid).timestamp,
                   session_id=session_id, source_ids=list(bank.unit(uid).source_ids), summary=summary,
                   keywords=keywords, degraded=degraded, prev=prev, k=k, anchors=anchors, edges=edges)
    return WriteResult(uid, anchors, edges, degraded, res.prompt_tokens + res.completion_tokens,
                       time.perf_counter() - start)


def replay_write(bank: MemoryBank, rec: dict, embedder: EmbeddingProvider) -> tuple[int, list[list]]:
    """Re-run an online write from its audit record, without a descriptor call."""
    vector = embed_descriptor(embedder, rec["summary"], rec["keywords"])
    uid = bank.create_unit(rec["evidence"], rec["summary"], rec["keywords"], vector,
                           rec["timestamp"], source_ids=rec["source_ids"])
    _, edges = _online_edges(bank, uid, rec["prev"], rec["k"])
    return uid, edges


__all__ = [
    "GateThresholds",
    "Proposal",
    "Routed",
    "RunReport",
    "WriteResult",
    "applicable",
    "coherence",
    "consolidate",
    "dereference_buffer",
    "gate",
    "map_diagnosis",
    "normalize",
    "reindex",
    "replay_write",
    "route",
    "write_online",
]
