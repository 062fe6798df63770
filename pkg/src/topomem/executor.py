"""Deterministic operator executor.

The LLM only ever produces plans. Everything that touches the graph (creating
units, archiving, mandatory version/sibling links, semantic rewiring and cap
trimming) happens here, under fixed ranking keys with an id tie-break.

Units created or re-described by an operator are embedded immediately with the
supplied provider so that similarity keys computed later in the same edit see
the new vectors; ``reindex`` afterwards only refreshes whatever is still stale
and rebuilds the surface index.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from topomem.bank import EdgeType, MemoryBank, TypedEdge, UnitType
from topomem.embedding import EmbeddingProvider, cosine, cosine_from, embed_descriptor
from topomem.schemas import DocumentError, parse_document

APPLIED = "APPLIED"
NOOP = "NOOP"
PLAN_VALIDATION_FAIL = "PLAN_VALIDATION_FAIL"
APPLICABLE_FAIL = "APPLICABLE_FAIL"


@dataclass(frozen=True)
class ExecutorConfig:
    anchor_k: int = 10
    redirect_on_update: bool = True
    keyword_bound: int = 16
    max_summary_chars: int = 4000
    max_keyword_chars: int = 128
    enforce_non_overlap: bool = False
    min_coverage: float | None = None  # eta_cov; None disables the check

    def to_record(self) -> dict:
        return {
            "anchor_k": self.anchor_k,
            "redirect_on_update": self.redirect_on_update,
            "keyword_bound": self.keyword_bound,
            "max_summary_chars": self.max_summary_chars,
            "max_keyword_chars": self.max_keyword_chars,
            "enforce_non_overlap": self.enforce_non_overlap,
            "min_coverage": self.min_coverage,
        }


# ------------------------------------------------------------------- plans


@dataclass(frozen=True)
class Segment:
    segment_text: str
    segment_summary: str
    segment_keywords: tuple[str, ...]
    topic_label: str = ""


@dataclass(frozen=True)
class SplitPlan:
    do_split: bool
    segments: tuple[Segment, ...]
    split_rationale: str = ""

    def to_doc(self) -> dict:
        return {
            "do_split": self.do_split,
            "segments": [
                {
                    "segment_text": s.segment_text,
                    "segment_summary": s.segment_summary,
                    "segment_keywords": list(s.segment_keywords),
                    "topic_label": s.topic_label,
                }
                for s in self.segments
            ],
            "split_rationale": self.split_rationale,
        }


@dataclass(frozen=True)
class MergePlan:
    summary: str
    keywords: tuple[str, ...]
    salient_points: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        return {
            "summary": self.summary,
            "keywords": list(self.keywords),
            "salient_points": list(self.salient_points),
        }


@dataclass(frozen=True)
class UpdatePlan:
    updated_summary: str
    updated_keywords: tuple[str, ...]
    deprecations: tuple[str, ...] = ()
    alignment_note: str = ""

    def to_doc(self) -> dict:
        return {
            "updated_summary": self.updated_summary,
            "updated_keywords": list(self.updated_keywords),
            "deprecations": list(self.deprecations),
            "alignment_note": self.alignment_note,
        }


Plan = SplitPlan | MergePlan | UpdatePlan

_PLAN_SCHEMA_IDS = {"SPLIT": "plan_split", "MERGE": "plan_merge", "UPDATE": "plan_update"}


def parse_plan(op: str, raw: str | bytes | dict) -> Plan:
    """Strictly parse a plan document; raises DocumentError on failure."""
    doc = parse_document(raw, _PLAN_SCHEMA_IDS[op])
    if op == "SPLIT":
        return SplitPlan(
            do_split=doc["do_split"],
            segments=tuple(
                Segment(
                    s["segment_text"],
                    s["segment_summary"],
                    tuple(s["segment_keywords"]),
                    s["topic_label"],
                )
                for s in doc["segments"]
            ),
            split_rationale=doc["split_rationale"],
        )
    if op == "MERGE":
        return MergePlan(doc["summary"], tuple(doc["keywords"]), tuple(doc["salient_points"]))
    return UpdatePlan(
        doc["updated_summary"],
        tuple(doc["updated_keywords"]),
        tuple(doc["deprecations"]),
        doc["alignment_note"],
    )


def normalize_keywords(keywords: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for kw in keywords:
        kw = kw.strip()
        if kw and kw not in seen:
            seen.add(kw)
            out.append(kw)
    return out


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: str
    noop: bool = False
    plan: Plan | None = None  # normalized plan when valid

    def __bool__(self) -> bool:
        return self.valid


def _check_descriptor(summary: str, keywords: list[str], cfg: ExecutorConfig, what: str) -> str | None:
    if not summary:
        return f"{what}: empty summary"
    if len(summary) > cfg.max_summary_chars:
        return f"{what}: summary longer than {cfg.max_summary_chars} chars"
    if not keywords:
        return f"{what}: empty keyword list"
    if len(keywords) > cfg.keyword_bound:
        return f"{what}: more than {cfg.keyword_bound} keywords"
    if any(len(k) > cfg.max_keyword_chars for k in keywords):
        return f"{what}: keyword longer than {cfg.max_keyword_chars} chars"
    return None


def validate_plan(
    op: str,
    plan: Plan,
    bank: MemoryBank,
    target: Sequence[int],
    cfg: ExecutorConfig = ExecutorConfig(),
) -> Verdict:
    """Mechanical, deterministic plan checks. Never raises."""
    if op == "SPLIT":
        if not isinstance(plan, SplitPlan):
            return Verdict(False, "plan type does not match SPLIT")
        evidence = bank.unit(target[0]).evidence
        if not plan.do_split:
            if len(plan.segments) == 1 and plan.segments[0].segment_text == evidence:
                return Verdict(True, "do_split=false", noop=True, plan=plan)
            return Verdict(False, "do_split=false requires exactly one segment equal to the evidence")
        if len(plan.segments) < 2:
            return Verdict(False, "do_split=true requires at least 2 segments")
        segments = []
        for j, seg in enumerate(plan.segments):
            if not seg.segment_text.strip():
                return Verdict(False, f"segment {j}: empty segment_text")
            if seg.segment_text not in evidence:
                return Verdict(False, f"segment {j}: not an exact substring of the evidence")
            summary = seg.segment_summary.strip()
            keywords = normalize_keywords(seg.segment_keywords)
            problem = _check_descriptor(summary, keywords, cfg, f"segment {j}")
            if problem:
                return Verdict(False, problem)
            segments.append(Segment(seg.segment_text, summary, tuple(keywords), seg.topic_label))
        if cfg.enforce_non_overlap:
            pos = 0
            for j, seg in enumerate(segments):
                found = evidence.find(seg.segment_text, pos)
                if found < 0:
                    return Verdict(False, f"segment {j}: overlaps or is out of order")
                pos = found + len(seg.segment_text)
        if cfg.min_coverage is not None and evidence:
            covered = sum(len(s.segment_text) for s in segments) / len(evidence)
            if covered < cfg.min_coverage:
                return Verdict(False, f"coverage {covered:.3f} below {cfg.min_coverage}")
        return Verdict(True, "ok", plan=SplitPlan(True, tuple(segments), plan.split_rationale))

    if op == "MERGE":
        if not isinstance(plan, MergePlan):
            return Verdict(False, "plan type does not match MERGE")
        if len(target) < 2:
            return Verdict(False, "merge needs at least 2 sources")
        summary = plan.summary.strip()
        keywords = normalize_keywords(plan.keywords)
        problem = _check_descriptor(summary, keywords, cfg, "merge")
        if problem:
            return Verdict(False, problem)
        return Verdict(True, "ok", plan=MergePlan(summary, tuple(keywords), plan.salient_points))

    if op == "UPDATE":
        if not isinstance(plan, UpdatePlan):
            return Verdict(False, "plan type does not match UPDATE")
        summary = plan.updated_summary.strip()
        keywords = normalize_keywords(plan.updated_keywords)
        problem = _check_descriptor(summary, keywords, cfg, "update")
        if problem:
            return Verdict(False, problem)
        normalized = UpdatePlan(summary, tuple(keywords), plan.deprecations, plan.alignment_note)
        current = bank.unit(target[0])
        if summary == current.summary and keywords == list(current.keywords):
            return Verdict(True, "descriptor unchanged", noop=True, plan=normalized)
        return Verdict(True, "ok", plan=normalized)

    return Verdict(False, f"unknown operator {op!r}")


# -------------------------------------------------------------------- keys


def _time_key(t: float | None) -> tuple[int, float]:
    # a missing timestamp ranks below every present one
    return (0, 0.0) if t is None else (1, t)


def key_sigma(bank: MemoryBank, p: int, u: int) -> tuple:
    up = bank.unit(p)
    uu = bank.unit(u)
    return (cosine(up.embedding, uu.embedding), _time_key(uu.timestamp), -u)


key_beta = key_sigma


def key_tau(bank: MemoryBank, v: int, u: int) -> tuple:
    return (_time_key(bank.unit(u).timestamp), -u)


key_nu = key_tau

_KEYS = {
    EdgeType.SEMANTIC: key_sigma,
    EdgeType.SIBLING: key_beta,
    EdgeType.TEMPORAL: key_tau,
    EdgeType.VERSION: key_nu,
}


def top_cap(bank: MemoryBank, v: int, edge_type: EdgeType, candidates: Iterable[int]) -> list[int]:
    """Candidates sorted by the edge type's key (descending), truncated to its cap."""
    key = _KEYS[edge_type]
    pool = {c for c in candidates if c != v}
    if edge_type is EdgeType.TEMPORAL:
        tv = bank.unit(v).timestamp
        if tv is not None:
            pool = {c for c in pool if bank.unit(c).timestamp is None or bank.unit(c).timestamp < tv}
    if key is key_sigma:
        sim = cosine_from(bank.unit(v).embedding)
        units = bank.units
        ranked = sorted(pool, key=lambda u: (sim(units[u].embedding), _time_key(units[u].timestamp), -u),
                        reverse=True)
    else:
        ranked = sorted(pool, key=lambda u: key(bank, v, u), reverse=True)
    cap = bank.caps.cap_for(edge_type)
    return ranked if cap is None else ranked[:cap]


# ------------------------------------------------------------ edit summary


@dataclass
class EditSummary:
    op: str
    target: tuple[int, ...]
    status: str  # APPLIED, NOOP, PLAN_VALIDATION_FAIL, APPLICABLE_FAIL
    reason: str = ""
    created: list[int] = field(default_factory=list)
    archived: list[int] = field(default_factory=list)
    redescribed: list[int] = field(default_factory=list)
    added_edges: list[TypedEdge] = field(default_factory=list)
    removed_edges: list[TypedEdge] = field(default_factory=list)
    redirected: list[tuple[int, int, int]] = field(default_factory=list)  # (p, old, new)
    digest: str = ""

    @property
    def applied(self) -> bool:
        return self.status == APPLIED

    def touched(self) -> set[int]:
        ids = set(self.target) | set(self.created) | set(self.archived) | set(self.redescribed)
        for e in self.added_edges + self.removed_edges:
            ids.add(e.src)
        return ids

    def to_record(self) -> dict:
        return {
            "created": list(self.created),
            "archived": list(self.archived),
            "redescribed": list(self.redescribed),
            "added_edges": [[e.src, e.dst, e.edge_type.value] for e in self.added_edges],
            "removed_edges": [[e.src, e.dst, e.edge_type.value] for e in self.removed_edges],
            "redirected": [list(r) for r in self.redirected],
            "digest": self.digest,
        }


class _Recorder:
    """Tracks net edge changes during one edit."""

    def __init__(self, bank: MemoryBank) -> None:
        self.bank = bank
        self.added: dict[TypedEdge, None] = {}
        self.removed: dict[TypedEdge, None] = {}

    def add(self, src: int, dst: int, et: EdgeType) -> None:
        if self.bank.add_edge(src, dst, et):
            e = TypedEdge(src, dst, et)
            if e in self.removed:
                del self.removed[e]
            else:
                self.added[e] = None

    def remove(self, src: int, dst: int, et: EdgeType) -> None:
        if self.bank.remove_edge(src, dst, et):
            e = TypedEdge(src, dst, et)
            if e in self.added:
                del self.added[e]
            else:
                self.removed[e] = None

    def set_out(self, v: int, et: EdgeType, keep: Sequence[int]) -> None:
        keep_set = set(keep)
        for dst in sorted(self.bank.out_ids(v, et) - keep_set):
            self.remove(v, dst, et)
        for dst in keep:
            self.add(v, dst, et)

    def finish(self, summary: EditSummary) -> EditSummary:
        summary.added_edges = sorted(self.added, key=lambda e: (e.src, e.dst, e.edge_type.value))
        summary.removed_edges = sorted(self.removed, key=lambda e: (e.src, e.dst, e.edge_type.value))
        return summary


def _unit_digest(bank: MemoryBank, ids: Iterable[int]) -> str:
    h = hashlib.sha256()
    for uid in sorted(set(ids)):
        u = bank.unit(uid)
        h.update(repr((uid, u.evidence, u.summary, u.keywords, u.timestamp, u.visible,
                       u.unit_type.value, u.source_ids, u.embedding.tobytes())).encode("utf-8"))
    return h.hexdigest()[:16]


# --------------------------------------------------------------- rewiring


def surface_top_k(bank: MemoryBank, vector: np.ndarray, k: int, exclude: Iterable[int] = ()) -> list[int]:
    """Exact top-k visible ids by cosine to ``vector``; ties by surface position."""
    from topomem.retrieval import top_k_indices

    ids, matrix, norms = bank.surface_index()
    excluded = set(exclude)
    if not ids or k <= 0:
        return []
    want = min(len(ids), k + len(excluded))
    picked = top_k_indices(matrix, norms, vector, want)
    return [ids[i] for i in picked if ids[i] not in excluded][:k]


def redirect_incoming_sigma(
    bank: MemoryBank, x: int, reps: Sequence[int], rec: _Recorder | None = None
) -> list[tuple[int, int, int]]:
    """Move visible units' semantic edges into archived ``x`` to their best representative."""
    if not reps:
        raise ValueError("empty representative set")
    own = rec is None
    rec = rec or _Recorder(bank)
    moved = []
    for p in sorted(bank.in_ids(x, EdgeType.SEMANTIC)):
        if not bank.unit(p).visible:
            continue
        options = [r for r in reps if r != p]
        if not options:
            # p is itself the representative: keep its edge rather than self-loop
            continue
        best = max(options, key=lambda r: key_sigma(bank, p, r))
        rec.remove(p, x, EdgeType.SEMANTIC)
        rec.add(p, best, EdgeType.SEMANTIC)
        rec.set_out(p, EdgeType.SEMANTIC, top_cap(bank, p, EdgeType.SEMANTIC, bank.out_ids(p, EdgeType.SEMANTIC)))
        moved.append((p, x, best))
    if own:
        rec.finish(EditSummary("REDIRECT", (x,), APPLIED))
    return moved


def build_sigma_outlinks(
    bank: MemoryBank,
    w: int,
    sources: Iterable[int],
    anchors: Iterable[int],
    rec: _Recorder | None = None,
) -> list[int]:
    """Set w's semantic out-links to TopCap over anchors plus the sources' semantic neighbors."""
    rec = rec or _Recorder(bank)
    pool = set(anchors)
    for x in sources:
        pool |= bank.out_ids(x, EdgeType.SEMANTIC)
    pool = {c for c in pool if c != w and bank.unit(c).visible}
    chosen = top_cap(bank, w, EdgeType.SEMANTIC, pool)
    rec.set_out(w, EdgeType.SEMANTIC, chosen)
    return chosen


def visible_nu_parents(bank: MemoryBank, x: int) -> set[int]:
    return {r for r in bank.in_ids(x, EdgeType.VERSION) if bank.unit(r).visible}


def prune_nu_no_orphan(bank: MemoryBank, r: int, rec: _Recorder | None = None) -> list[int]:
    """Trim r's version out-links to the cap without orphaning any archived child."""
    children = sorted(bank.out_ids(r, EdgeType.VERSION))
    cap = bank.caps.cap_nu_out
    if cap is None or len(children) <= cap:
        return children
    mandatory = [
        x for x in children
        if not bank.unit(x).visible and visible_nu_parents(bank, x) == {r}
    ]
    if len(mandatory) > cap:
        return children
    rest = [x for x in children if x not in set(mandatory)]
    rest.sort(key=lambda u: key_nu(bank, r, u), reverse=True)
    keep = mandatory + rest[: cap - len(mandatory)]
    rec = rec or _Recorder(bank)
    for x in children:
        if x not in keep:
            rec.remove(r, x, EdgeType.VERSION)
    return sorted(keep)


def _prune_version_outlinks(bank: MemoryBank, parents: Iterable[int], rec: _Recorder) -> None:
    if bank.caps.cap_nu_out is None:
        return
    for r in sorted(set(parents)):
        if bank.unit(r).visible:
            prune_nu_no_orphan(bank, r, rec)


# -------------------------------------------------------------- operators


def apply_split(
    bank: MemoryBank,
    v: int,
    plan: Plan,
    embedder: EmbeddingProvider,
    cfg: ExecutorConfig = ExecutorConfig(),
) -> EditSummary:
    verdict = validate_plan("SPLIT", plan, bank, (v,), cfg)
    if not verdict.valid:
        return EditSummary("SPLIT", (v,), PLAN_VALIDATION_FAIL, verdict.reason)
    if verdict.noop:
        return EditSummary("SPLIT", (v,), NOOP, verdict.reason)
    target = bank.unit(v)
    if not target.visible:
        return EditSummary("SPLIT", (v,), APPLICABLE_FAIL, "target is archived")
    plan = verdict.plan
    assert isinstance(plan, SplitPlan)
    # embed everything up front so a provider failure leaves the bank untouched
    vectors = [embed_descriptor(embedder, s.segment_summary, s.segment_keywords) for s in plan.segments]
    rec = _Recorder(bank)
    out = EditSummary("SPLIT", (v,), APPLIED)
    for seg, vec in zip(plan.segments, vectors):
        child = bank.create_unit(
            evidence=seg.segment_text,
            summary=seg.segment_summary,
            keywords=seg.segment_keywords,
            embedding=vec,
            timestamp=target.timestamp,
            unit_type=UnitType.SPLIT_CHILD,
            source_ids=target.source_ids,
        )
        out.created.append(child)
    bank.set_visibility(v, False)
    out.archived.append(v)
    for child in out.created:
        rec.add(child, v, EdgeType.VERSION)
    for child in out.created:
        siblings = [c for c in out.created if c != child]
        rec.set_out(child, EdgeType.SIBLING, top_cap(bank, child, EdgeType.SIBLING, siblings))
    out.redirected = redirect_incoming_sigma(bank, v, out.created, rec)
    for child in out.created:
        anchors = surface_top_k(bank, bank.unit(child).embedding, cfg.anchor_k, exclude=(child,))
        build_sigma_outlinks(bank, child, (v,), anchors, rec)
    _prune_version_outlinks(bank, out.created, rec)
    out.digest = _unit_digest(bank, out.created + out.archived)
    return rec.finish(out)


def apply_merge(
    bank: MemoryBank,
    sources: Sequence[int],
    plan: Plan,
    embedder: EmbeddingProvider,
    cfg: ExecutorConfig = ExecutorConfig(),
) -> EditSummary:
    target = tuple(sorted(set(sources)))
    verdict = validate_plan("MERGE", plan, bank, target, cfg)
    if not verdict.valid:
        return EditSummary("MERGE", target, PLAN_VALIDATION_FAIL, verdict.reason)
    if any(not bank.unit(s).visible for s in target):
        return EditSummary("MERGE", target, APPLICABLE_FAIL, "source is archived")
    plan = verdict.plan
    assert isinstance(plan, MergePlan)
    units = [bank.unit(s) for s in target]
    stamps = [u.timestamp for u in units if u.timestamp is not None]
    provenance: list[str] = []
    for u in units:
        for s in u.source_ids:
            if s not in provenance:
                provenance.append(s)
    vector = embed_descriptor(embedder, plan.summary, plan.keywords)
    rec = _Recorder(bank)
    out = EditSummary("MERGE", target, APPLIED)
    rep = bank.create_unit(
        evidence="MERGED_FROM: " + ",".join(str(s) for s in target),
        summary=plan.summary,
        keywords=plan.keywords,
        embedding=vector,
        timestamp=max(stamps) if stamps else None,
        unit_type=UnitType.MERGE_REPRESENTATIVE,
        source_ids=provenance,
    )
    out.created.append(rep)
    for s in target:
        bank.set_visibility(s, False)
        out.archived.append(s)
    for s in target:
        rec.add(rep, s, EdgeType.VERSION)
    for s in target:
        out.redirected.extend(redirect_incoming_sigma(bank, s, (rep,), rec))
    anchors = surface_top_k(bank, bank.unit(rep).embedding, cfg.anchor_k, exclude=(rep,))
    build_sigma_outlinks(bank, rep, target, anchors, rec)
    _prune_version_outlinks(bank, (rep,), rec)
    out.digest = _unit_digest(bank, out.created + out.archived)
    return rec.finish(out)


def apply_update(
    bank: MemoryBank,
    pair: Sequence[int],
    plan: Plan,
    embedder: EmbeddingProvider,
    cfg: ExecutorConfig = ExecutorConfig(),
) -> EditSummary:
    u, v = pair
    target = (u, v)
    if u == v:
        return EditSummary("UPDATE", target, PLAN_VALIDATION_FAIL, "current and superseded are the same unit")
    verdict = validate_plan("UPDATE", plan, bank, target, cfg)
    if not verdict.valid:
        return EditSummary("UPDATE", target, PLAN_VALIDATION_FAIL, verdict.reason)
    if verdict.noop:
        return EditSummary("UPDATE", target, NOOP, verdict.reason)
    if not bank.unit(u).visible:
        return EditSummary("UPDATE", target, APPLICABLE_FAIL, "current unit is archived")
    plan = verdict.plan
    assert isinstance(plan, UpdatePlan)
    vector = embed_descriptor(embedder, plan.updated_summary, plan.updated_keywords)
    rec = _Recorder(bank)
    out = EditSummary("UPDATE", target, APPLIED)
    bank.set_descriptor(u, plan.updated_summary, plan.updated_keywords)
    bank.set_embedding(u, vector)
    out.redescribed.append(u)
    if bank.unit(v).visible:
        bank.set_visibility(v, False)
        out.archived.append(v)
    rec.add(u, v, EdgeType.VERSION)
    if cfg.redirect_on_update:
        out.redirected = redirect_incoming_sigma(bank, v, (u,), rec)
    _prune_version_outlinks(bank, (u,), rec)
    out.digest = _unit_digest(bank, [u, v])
    return rec.finish(out)


def apply_plan(
    bank: MemoryBank,
    op: str,
    target: Sequence[int],
    plan: Plan,
    embedder: EmbeddingProvider,
    cfg: ExecutorConfig = ExecutorConfig(),
) -> EditSummary:
    if op == "SPLIT":
        return apply_split(bank, target[0], plan, embedder, cfg)
    if op == "MERGE":
        return apply_merge(bank, target, plan, embedder, cfg)
    if op == "UPDATE":
        return apply_update(bank, target, plan, embedder, cfg)
    raise ValueError(f"unknown operator {op!r}")


__all__ = [
    "APPLIED",
    "NOOP",
    "PLAN_VALIDATION_FAIL",
    "DocumentError",
    "EditSummary",
    "ExecutorConfig",
    "MergePlan",
    "Segment",
    "SplitPlan",
    "UpdatePlan",
    "Verdict",
    "apply_merge",
    "apply_plan",
    "apply_split",
    "apply_update",
    "build_sigma_outlinks",
    "key_beta",
    "key_nu",
    "key_sigma",
    "key_tau",
    "normalize_keywords",
    "parse_plan",
    "prune_nu_no_orphan",
    "redirect_incoming_sigma",
    "top_cap",
    "validate_plan",
]
