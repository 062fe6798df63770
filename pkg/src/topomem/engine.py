"""Configuration, store layout and the stateful engine used by the CLI."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

from topomem.atc import GateThresholds, RunReport, WriteResult, consolidate, write_online
from topomem.audit import AuditLog, MetricsLog, load_snapshot, save_snapshot
from topomem.bank import ConsolidationBuffer, DegreeCaps, MemoryBank
from topomem.embedding import EmbeddingProvider, HttpEmbedder, StubEmbedder
from topomem.executor import ExecutorConfig
from topomem.gateway import BackendConfig, Gateway
from topomem.retrieval import QueryBudget, QueryResult, query

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    dim: int = 64
    # degree caps
    cap_tau: int = 1
    cap_sigma: int = 5
    cap_beta: int = 5
    cap_nu_out: int | None = None
    # query budgets
    k: int = 10
    L: int = 40
    H_q: int = 2
    K: int = 16
    token_budget: int = 2048
    # gating
    theta_split: float = 0.9
    theta_merge: float = 0.9
    theta_update: float = 0.9
    gamma_merge: float = 0.7
    # consolidation trigger; any that is set can fire
    every_sessions: int | None = 3
    every_turns: int | None = None
    buffer_size: int | None = None
    workers: int = 1
    # backends
    backend: str = "stub"
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "OPENAI_API_KEY"
    embedder: str = "stub"
    embed_endpoint: str = ""
    embed_model: str = ""
    redirect_on_update: bool = True

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Config:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> Config:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def merged(self, **overrides: Any) -> Config:
        changes = {k: v for k, v in overrides.items() if v is not None}
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.caps()
            self.budget()
            self.thresholds()
            self.backend_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.dim <= 0:
            raise ConfigError("dim must be positive")
        for name in ("every_sessions", "every_turns", "buffer_size"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.embedder not in ("stub", "http"):
            raise ConfigError(f"unknown embedder {self.embedder!r}")

    def to_record(self) -> dict:
        return dataclasses.asdict(self)

    def caps(self) -> DegreeCaps:
        return DegreeCaps(self.cap_tau, self.cap_sigma, self.cap_beta, self.cap_nu_out)

    def budget(self) -> QueryBudget:
        return QueryBudget(self.k, self.L, self.H_q, self.K, self.token_budget)

    def thresholds(self) -> GateThresholds:
        return GateThresholds(
            (("SPLIT", self.theta_split), ("MERGE", self.theta_merge), ("UPDATE", self.theta_update)),
            self.gamma_merge,
        )

    def executor(self) -> ExecutorConfig:
        return ExecutorConfig(anchor_k=self.k, redirect_on_update=self.redirect_on_update)

    def backend_config(self) -> BackendConfig:
        return BackendConfig(self.backend, self.endpoint, self.model, self.api_key_env)

    def make_embedder(self) -> EmbeddingProvider:
        if self.embedder == "stub":
            return StubEmbedder(self.dim)
        return HttpEmbedder(self.embed_endpoint, self.embed_model, self.dim, self.api_key_env)


# ------------------------------------------------------------------- turns


@dataclass(frozen=True)
class Turn:
    text: str
    session_id: str
    timestamp: float | None = None
    source_id: str | None = None


class RecordError(ValueError):
    pass


def parse_timestamp(value: Any) -> float | None:
    if value is None:
        return None
    if isinstance(value, bool):
        raise RecordError("timestamp must be a number or ISO-8601 string")
    if isinstance(value, (int, float)):
        t = float(value)
        if t != t or t in (float("inf"), float("-inf")):
            raise RecordError("timestamp is not finite")
        return t
    if isinstance(value, str):
        text = value.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError:
            raise RecordError(f"bad timestamp {value!r}") from None
        if dt.tzinfo is None:
            dt = dt.replace(tzinfo=timezone.utc)
        return dt.timestamp()
    raise RecordError("timestamp must be a number or ISO-8601 string")


def parse_turn(record: Any) -> Turn:
    if not isinstance(record, dict):
        raise RecordError("turn record must be an object")
    text = record.get("text")
    if not isinstance(text, str) or not text.strip():
        raise RecordError("turn record needs non-empty 'text'")
    session = record.get("session_id")
    if not isinstance(session, (str, int)) or isinstance(session, bool):
        raise RecordError("turn record needs 'session_id'")
    source = record.get("source_id")
    if source is not None and not isinstance(source, (str, int)):
        raise RecordError("'source_id' must be a string")
    return Turn(text, str(session), parse_timestamp(record.get("timestamp")),
                None if source is None else str(source))


def read_turns(lines: Iterable[str]) -> Iterator[tuple[int, Turn | RecordError]]:
    """Yield (line number, Turn or the error that made the line unusable)."""
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            yield lineno, parse_turn(json.loads(line))
        except ValueError as exc:  # includes RecordError and JSON errors
            yield lineno, exc if isinstance(exc, RecordError) else RecordError(f"bad JSON: {exc}")


# ------------------------------------------------------------------ engine


@dataclass
class SessionState:
    last_session: str | None = None
    last_unit: dict[str, int] = field(default_factory=dict)
    boundaries: int = 0  # session boundaries since the last consolidation
    turns_since: int = 0
    turns: int = 0

    def to_record(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> SessionState:
        return cls(rec.get("last_session"), {str(k): int(v) for k, v in rec.get("last_unit", {}).items()},
                   int(rec.get("boundaries", 0)), int(rec.get("turns_since", 0)), int(rec.get("turns", 0)))


class Engine:
    """Owns one bank with its buffer, audit log and metrics."""

    def __init__(
        self,
        config: Config | None = None,
        bank: MemoryBank | None = None,
        buffer: ConsolidationBuffer | None = None,
        audit: AuditLog | None = None,
        metrics: MetricsLog | None = None,
        state: SessionState | None = None,
        gateway: Gateway | None = None,
        embedder: EmbeddingProvider | None = None,
    ) -> None:
        self.config = config or Config()
        self.bank = bank if bank is not None else MemoryBank(self.config.dim, self.config.caps())
        self.buffer = buffer if buffer is not None else ConsolidationBuffer()
        self.audit = audit if audit is not None else AuditLog()
        self.metrics = metrics if metrics is not None else MetricsLog()
        self.state = state or SessionState()
        self.gateway = gateway or Gateway(self.config.backend_config().build())
        self.embedder = embedder or self.config.make_embedder()
        self.reports: list[RunReport] = []

    # --- online

    def _due_before(self, turn: Turn) -> bool:
        every = self.config.every_sessions
        if every is None or self.state.last_session is None or turn.session_id == self.state.last_session:
            return False
        return self.state.boundaries + 1 >= every

    def _due_after(self) -> bool:
        c = self.config
        if c.every_turns is not None and self.state.turns_since >= c.every_turns:
            return True
        return c.buffer_size is not None and len(self.buffer) >= c.buffer_size

    def ingest(self, turn: Turn) -> WriteResult:
        st = self.state
        if self._due_before(turn):
            # this turn opens the session that completes the interval; consolidate the finished ones first
            self.consolidate(trigger="sessions")
        elif st.last_session is not None and turn.session_id != st.last_session:
            st.boundaries += 1
        res = write_online(
            self.bank,
            self.buffer,
            turn.text,
            turn.timestamp,
            self.gateway,
            self.embedder,
            k=self.config.k,
            prev=st.last_unit.get(turn.session_id),
            source_ids=[turn.source_id or turn.session_id],
            audit=self.audit,
            session_id=turn.session_id,
        )
        st.last_session = turn.session_id
        st.last_unit[turn.session_id] = res.unit
        st.turns += 1
        st.turns_since += 1
        self.metrics.add("write", turn=st.turns, unit=res.unit, latency_s=res.latency_s, tokens=res.tokens)
        if self._due_after():
            self.consolidate(trigger="turns" if self.config.every_turns else "buffer")
        return res

    # --- offline

    def consolidate(self, trigger: str = "manual") -> RunReport:
        report = consolidate(
            self.bank,
            self.buffer,
            self.gateway,
            self.embedder,
            self.config.thresholds(),
            self.config.executor(),
            self.audit,
            self.config.workers,
            trigger,
        )
        self.metrics.add("event", run=report.run, turn=self.state.turns, latency_s=report.latency_s,
                         tokens=report.tokens, ops=len(report.applied), calls=report.calls,
                         proposals=report.proposals)
        self.state.boundaries = 0
        self.state.turns_since = 0
        self.reports.append(report)
        return report

    # --- retrieval

    def query(self, text: str, budget: QueryBudget | None = None) -> QueryResult:
        return query(self.bank, text, self.embedder, budget or self.config.budget())


# ------------------------------------------------------------------- store


class Store:
    """Directory layout for a persisted engine."""

    CONFIG = "config.json"
    SNAPSHOT = "snapshot.jsonl"
    SNAPSHOT0 = "snapshot0.jsonl"
    BUFFER = "buffer.jsonl"
    AUDIT = "audit.jsonl"
    METRICS = "metrics.jsonl"
    STATE = "state.json"
    LOCK = ".lock"

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self) -> bool:
        return self.path(self.SNAPSHOT).exists()

    def lock(self, timeout: float = 10.0):
        from filelock import FileLock

        self.root.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path(self.LOCK)), timeout=timeout)

    def config(self, override: Config | None = None) -> Config:
        if override is not None:
            return override
        p = self.path(self.CONFIG)
        return Config.from_file(p) if p.exists() else Config()

    def init(self, config: Config) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.path(self.CONFIG).write_text(json.dumps(config.to_record(), indent=2, sort_keys=True) + "\n")
        empty = MemoryBank(config.dim, config.caps())
        save_snapshot(empty, self.path(self.SNAPSHOT0))
        save_snapshot(empty, self.path(self.SNAPSHOT))
        for name in (self.BUFFER, self.AUDIT, self.METRICS):
            self.path(name).write_text("")
        self.path(self.STATE).write_text(json.dumps(SessionState().to_record(), sort_keys=True) + "\n")

    def load(self, config: Config | None = None) -> Engine:
        cfg = self.config(config)
        bank = load_snapshot(self.path(self.SNAPSHOT))
        buffer = ConsolidationBuffer.loads(self.path(self.BUFFER).read_text(encoding="utf-8"))
        audit = AuditLog.open(self.path(self.AUDIT))
        metrics = MetricsLog.open(self.path(self.METRICS))
        state_path = self.path(self.STATE)
        state = SessionState.from_record(json.loads(state_path.read_text())) if state_path.exists() else SessionState()
        return Engine(cfg, bank, buffer, audit, metrics, state)

    def save(self, engine: Engine) -> None:
        save_snapshot(engine.bank, self.path(self.SNAPSHOT))
        tmp = self.path(self.BUFFER + ".tmp")
        tmp.write_text(engine.buffer.dumps(), encoding="utf-8")
        os.replace(tmp, self.path(self.BUFFER))
        tmp = self.path(self.STATE + ".tmp")
        tmp.write_text(json.dumps(engine.state.to_record(), sort_keys=True) + "\n")
        os.replace(tmp, self.path(self.STATE))

