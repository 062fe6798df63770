"""Append-only audit log, snapshot I/O, deterministic replay and cost accounting.

The audit log holds only deterministic content (online writes with their
recorded descriptors, consolidation markers, per-proposal decisions), so two
identical runs produce byte-identical logs. Wall-clock latencies and token
usage go to a separate metrics log.

Records carry ``run`` (the epoch: writes since the last consolidation plus that
consolidation) and ``seq`` (0-based, contiguous within a run).
"""

from __future__ import annotations

import json
import os
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from topomem.bank import MemoryBank, SnapshotError

REASON_CODES = (
    "JSON_PARSE_FAIL",
    "SCHEMA_FAIL",
    "LOW_CONF",
    "NORM_FILTER",
    "VISIBILITY_FAIL",
    "ARITY_FAIL",
    "COH_FAIL",
    "APPLICABLE_FAIL",
    "TOUCHED_CONFLICT",
    "MISSING_ID",
    "PLAN_VALIDATION_FAIL",
    "APPLIED",
    "NOOP",
)
RECORD_KINDS = ("write", "consolidate", "decision", "run_end")
OP_RANK = {"DIAG": -1, "SPLIT": 0, "MERGE": 1, "UPDATE": 2}


class AuditError(Exception):
    pass


class ReplayDivergence(AuditError):
    """Replay produced a different effect than the one recorded."""

    def __init__(self, run: int, seq: int, detail: str) -> None:
        super().__init__(f"divergence at run {run} seq {seq}: {detail}")
        self.run = run
        self.seq = seq
        self.detail = detail


def _line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n"


class AuditLog:
    """In-memory record list, optionally mirrored to an append-only file."""

    def __init__(self, path: str | os.PathLike | None = None) -> None:
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        self.run = 0
        self.next_seq = 0

    # --- appending

    def _check(self, rec: dict) -> None:
        kind = rec.get("kind")
        if kind not in RECORD_KINDS:
            raise AuditError(f"unknown record kind {kind!r}")
        run, seq = rec.get("run"), rec.get("seq")
        if not isinstance(run, int) or not isinstance(seq, int):
            raise AuditError("record needs integer run and seq")
        if self.records:
            last = self.records[-1]
            if run == last["run"]:
                if seq != last["seq"] + 1:
                    raise AuditError(f"run {run}: seq {seq} does not follow {last['seq']}")
            elif run > last["run"]:
                if seq != 0:
                    raise AuditError(f"run {run} must start at seq 0, got {seq}")
            else:
                raise AuditError(f"run {run} precedes run {last['run']}")
        elif seq != 0:
            raise AuditError(f"first record must have seq 0, got {seq}")
        if kind == "decision":
            reason = rec.get("reason")
            if reason not in REASON_CODES:
                raise AuditError(f"unknown reason code {reason!r}")
            if reason == "APPLIED" and not rec.get("edit"):
                raise AuditError("APPLIED decision without edit summary")
            if reason != "APPLIED" and rec.get("edit"):
                raise AuditError("edit summary on a non-APPLIED decision")

    def append(self, rec: dict) -> dict:
        self._check(rec)
        line = _line(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
        self.records.append(rec)
        self.run = rec["run"]
        self.next_seq = rec["seq"] + 1
        return rec

    def emit(self, kind: str, **fields) -> dict:
        rec = {"kind": kind, "run": self.run, "seq": self.next_seq, **fields}
        return self.append(rec)

    def close_run(self) -> None:
        """Start a new epoch; the next record gets run+1, seq 0."""
        self.run += 1
        self.next_seq = 0

    # --- reading

    def dumps(self) -> str:
        return "".join(_line(r) for r in self.records)

    @classmethod
    def loads(cls, text: str, path: str | os.PathLike | None = None) -> AuditLog:
        log = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise SnapshotError(lineno, f"bad audit record: {exc}") from None
            try:
                log.append(rec)
            except AuditError as exc:
                raise SnapshotError(lineno, str(exc)) from None
        if log.records and log.records[-1]["kind"] == "run_end":
            log.close_run()
        log.path = Path(path) if path is not None else None
        return log

    @classmethod
    def open(cls, path: str | os.PathLike) -> AuditLog:
        p = Path(path)
        text = p.read_text(encoding="utf-8") if p.exists() else ""
        return cls.loads(text, path=p)

    def decisions(self, run: int | None = None) -> list[dict]:
        return [r for r in self.records if r["kind"] == "decision" and (run is None or r["run"] == run)]

    def reason_counts(self) -> Counter[str]:
        return Counter(r["reason"] for r in self.decisions())


# ----------------------------------------------------------------- snapshots


def save_snapshot(bank: MemoryBank, path: str | os.PathLike) -> None:
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_text(bank.dumps(), encoding="utf-8")
    os.replace(tmp, p)


def load_snapshot(path: str | os.PathLike) -> MemoryBank:
    return MemoryBank.loads(Path(path).read_text(encoding="utf-8"))


# -------------------------------------------------------------------- replay


def replay(snapshot0: MemoryBank, records: Iterable[dict], embedder) -> MemoryBank:
    """Re-run recorded writes and APPLIED edits on a copy of ``snapshot0``.

    No backend calls are made except to the embedding provider, which must be
    the one used live. Raises ReplayDivergence at the first mismatch.
    """
    from topomem.atc import reindex, replay_write
    from topomem.executor import ExecutorConfig, apply_plan, parse_plan
    from topomem.schemas import DocumentError

    bank = snapshot0.copy()
    cfg = ExecutorConfig()
    for rec in records:
        kind, run, seq = rec["kind"], rec["run"], rec["seq"]
        if kind == "write":
            try:
                uid, added = replay_write(bank, rec, embedder)
            except Exception as exc:  # noqa: BLE001 - any failure is a divergence
                raise ReplayDivergence(run, seq, f"write failed: {exc}") from exc
            if uid != rec["unit"]:
                raise ReplayDivergence(run, seq, f"write created unit {uid}, log says {rec['unit']}")
            if added != rec["edges"]:
                raise ReplayDivergence(run, seq, "online edges differ")
        elif kind == "consolidate":
            cfg = ExecutorConfig(**rec["executor"])
        elif kind == "decision" and rec["reason"] == "APPLIED":
            try:
                plan = parse_plan(rec["op"], rec["plan"])
            except DocumentError as exc:
                raise ReplayDivergence(run, seq, f"recorded plan invalid: {exc}") from None
            target = [int(t) for t in rec["target"]]
            for t in target:
                if t not in bank:
                    raise ReplayDivergence(run, seq, f"target {t} does not exist")
            summary = apply_plan(bank, rec["op"], target, plan, embedder, cfg)
            if summary.status != "APPLIED":
                raise ReplayDivergence(run, seq, f"edit ended {summary.status}: {summary.reason}")
            if summary.to_record() != rec["edit"]:
                raise ReplayDivergence(run, seq, "edit summary differs from the recorded one")
        elif kind == "run_end":
            reindex(bank, embedder)
            if bank.digest() != rec["digest"]:
                raise ReplayDivergence(run, seq, "bank digest differs at end of run")
    return bank


# ------------------------------------------------------------------- metrics


class MetricsLog:
    """Non-deterministic measurements: latencies and token usage."""

    def __init__(self, path: str | os.PathLike | None = None) -> None:
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None

    def add(self, kind: str, **fields) -> None:
        rec = {"kind": kind, **fields}
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(_line(rec))
        self.records.append(rec)

    @classmethod
    def open(cls, path: str | os.PathLike) -> MetricsLog:
        p = Path(path)
        log = cls()
        if p.exists():
            for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
                if line.strip():
                    try:
                        log.records.append(json.loads(line))
                    except ValueError as exc:
                        raise SnapshotError(lineno, f"bad metrics record: {exc}") from None
        log.path = p
        return log


@dataclass
class CostMetrics:
    turns: int
    events: int
    online_latency_mean: float
    online_latency_median: float
    online_tokens_mean: float
    event_latency_mean: float
    event_tokens_mean: float
    ops_per_event_mean: float
    realized_interval: float
    amortized_offline_s: float
    amortized_offline_tokens: float
    amortized_to_online_ratio: float
    proposals: int = 0
    applied: int = 0
    reason_counts: dict[str, int] = field(default_factory=dict)
    reason_fractions: dict[str, float] = field(default_factory=dict)
    note: str = "realized interval = total turns / events; a trailing partial interval counts pro-rata"

    def to_record(self) -> dict:
        return dict(self.__dict__)


def amortize(event_cost: float, interval: float) -> float:
    return event_cost / interval if interval > 0 else 0.0


def _mean(xs: Sequence[float]) -> float:
    return statistics.fmean(xs) if xs else 0.0


def summarize_run(metrics: Sequence[dict], total_turns: int | None = None,
                  decisions: Sequence[dict] = ()) -> CostMetrics:
    writes = [m for m in metrics if m["kind"] == "write"]
    events = [m for m in metrics if m["kind"] == "event"]
    turns = len(writes) if total_turns is None else total_turns
    on_lat = [m["latency_s"] for m in writes]
    ev_lat = [m["latency_s"] for m in events]
    interval = turns / len(events) if events else 0.0
    ev_mean = _mean(ev_lat)
    amortized = amortize(ev_mean, interval) if events else 0.0
    on_mean = _mean(on_lat)
    counts = Counter(d["reason"] for d in decisions)
    total = sum(counts.values())
    return CostMetrics(
        turns=turns,
        events=len(events),
        online_latency_mean=on_mean,
        online_latency_median=statistics.median(on_lat) if on_lat else 0.0,
        online_tokens_mean=_mean([m.get("tokens", 0) for m in writes]),
        event_latency_mean=ev_mean,
        event_tokens_mean=_mean([m.get("tokens", 0) for m in events]),
        ops_per_event_mean=_mean([m.get("ops", 0) for m in events]),
        realized_interval=interval,
        amortized_offline_s=amortized,
        amortized_offline_tokens=amortize(_mean([m.get("tokens", 0) for m in events]), interval) if events else 0.0,
        amortized_to_online_ratio=amortized / on_mean if on_mean > 0 else 0.0,
        proposals=total,
        applied=counts.get("APPLIED", 0),
        reason_counts={c: counts.get(c, 0) for c in REASON_CODES},
        reason_fractions={c: (counts.get(c, 0) / total if total else 0.0) for c in REASON_CODES},
    )
