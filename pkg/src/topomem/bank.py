"""Memory bank: units, typed directed edges, visibility, and canonical serialization."""

from __future__ import annotations

import enum
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np


class BankError(Exception):
    """Raised when a bank primitive is called with invalid arguments."""


class SnapshotError(BankError):
    """Raised when a snapshot file cannot be parsed."""

    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EdgeType(str, enum.Enum):
    TEMPORAL = "temporal"
    SEMANTIC = "semantic"
    VERSION = "version"
    SIBLING = "sibling_split"

    @classmethod
    def parse(cls, name: str | EdgeType) -> EdgeType:
        if isinstance(name, EdgeType):
            return name
        if name == "revision":
            return cls.VERSION
        try:
            return cls(name)
        except ValueError:
            raise BankError(f"unknown edge type {name!r}") from None


# Serialization order for (src, dst, type) sorting uses the string name.
EDGE_TYPES: tuple[EdgeType, ...] = (
    EdgeType.TEMPORAL,
    EdgeType.SEMANTIC,
    EdgeType.VERSION,
    EdgeType.SIBLING,
)


class UnitType(str, enum.Enum):
    RAW = "raw"
    SPLIT_CHILD = "split_child"
    MERGE_REPRESENTATIVE = "merge_representative"


UNREACHABLE = -1
"""Sentinel hop count for 'no directed path'."""


@dataclass
class MemoryUnit:
    id: int
    evidence: str
    summary: str
    keywords: list[str]
    embedding: np.ndarray
    timestamp: float | None
    visible: bool = True
    unit_type: UnitType = UnitType.RAW
    source_ids: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "evidence": self.evidence,
            "summary": self.summary,
            "keywords": list(self.keywords),
            "embedding": [float(x) for x in self.embedding],
            "timestamp": self.timestamp,
            "visible": self.visible,
            "unit_type": self.unit_type.value,
            "source_ids": list(self.source_ids),
        }


@dataclass(frozen=True, order=True)
class TypedEdge:
    src: int
    dst: int
    edge_type: EdgeType

    def to_record(self) -> dict:
        return {"src": self.src, "dst": self.dst, "type": self.edge_type.value}


_CAP_FIELD = {
    EdgeType.TEMPORAL: "cap_tau",
    EdgeType.SEMANTIC: "cap_sigma",
    EdgeType.SIBLING: "cap_beta",
    EdgeType.VERSION: "cap_nu_out",
}


@dataclass(frozen=True)
class DegreeCaps:
    cap_tau: int = 1
    cap_sigma: int = 5
    cap_beta: int = 5
    cap_nu_out: int | None = None  # None means unbounded

    def cap_for(self, edge_type: EdgeType) -> int | None:
        return getattr(self, _CAP_FIELD[edge_type])

    def to_record(self) -> dict:
        return {
            "cap_tau": self.cap_tau,
            "cap_sigma": self.cap_sigma,
            "cap_beta": self.cap_beta,
            "cap_nu_out": self.cap_nu_out,
        }


@dataclass
class ConsolidationBuffer:
    """Pending (new unit id, anchor ids) pointers awaiting offline consolidation."""

    records: list[tuple[int, list[int]]] = field(default_factory=list)

    def push(self, unit_id: int, anchor_ids: Iterable[int]) -> None:
        self.records.append((int(unit_id), [int(a) for a in anchor_ids]))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[tuple[int, list[int]]]:
        return iter(self.records)

    def dumps(self) -> str:
        return "".join(
            _dump_line({"id": uid, "anchors": anchors}) for uid, anchors in self.records
        )

    @classmethod
    def loads(cls, text: str) -> ConsolidationBuffer:
        buf = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                buf.push(rec["id"], rec["anchors"])
            except (ValueError, KeyError, TypeError) as exc:
                raise SnapshotError(lineno, f"bad buffer record: {exc}") from None
        return buf


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule}: {self.subject} {self.detail}".rstrip()


def _dump_line(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"), allow_nan=False) + "\n"


class MemoryBank:
    """Graph of memory units and typed directed edges.

    Raw edge primitives do not enforce degree caps; cap maintenance belongs to
    the executor. Units are never deleted.
    """

    SNAPSHOT_FORMAT = "topomem-snapshot/1"

    def __init__(self, dim: int, caps: DegreeCaps | None = None) -> None:
        if dim <= 0:
            raise BankError("embedding dimension must be positive")
        self.dim = dim
        self.caps = caps or DegreeCaps()
        self.units: dict[int, MemoryUnit] = {}
        self.next_id = 0
        self._out: dict[int, dict[EdgeType, set[int]]] = {}
        self._in: dict[int, dict[EdgeType, set[int]]] = {}
        self._n_edges = 0
        # units whose descriptor changed since their embedding was computed
        self.stale: set[int] = set()
        self._surface_cache: tuple[list[int], np.ndarray, np.ndarray] | None = None
        self._lines: dict[int, str] = {}  # serialized unit records, dropped on mutation
        self._edge_lines: dict[int, str] = {}  # serialized out-edges per source
        # dense row-per-id copies of embeddings and visibility for index builds
        self._mat = np.zeros((16, dim))
        self._vis = np.zeros(16, dtype=bool)

    # ------------------------------------------------------------------ units

    def create_unit(
        self,
        evidence: str,
        summary: str,
        keywords: Sequence[str],
        embedding: Sequence[float] | np.ndarray,
        timestamp: float | None = None,
        unit_type: UnitType = UnitType.RAW,
        source_ids: Sequence[str] = (),
    ) -> int:
        vec = np.asarray(embedding, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise BankError(f"embedding has shape {vec.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(vec)):
            raise BankError("embedding has non-finite entries")
        uid = self.next_id
        self.next_id += 1
        vec = vec.copy()
        vec.flags.writeable = False
        self.units[uid] = MemoryUnit(
            id=uid,
            evidence=evidence,
            summary=summary,
            keywords=list(keywords),
            embedding=vec,
            timestamp=None if timestamp is None else float(timestamp),
            visible=True,
            unit_type=UnitType(unit_type),
            source_ids=[str(s) for s in source_ids],
        )
        self._out[uid] = {}
        self._in[uid] = {}
        self._store_row(uid, vec, True)
        return uid

    def _store_row(self, uid: int, vec: np.ndarray, visible: bool) -> None:
        if uid >= len(self._vis):
            size = max(uid + 1, 2 * len(self._vis))
            mat = np.zeros((size, self.dim))
            mat[: len(self._vis)] = self._mat
            vis = np.zeros(size, dtype=bool)
            vis[: len(self._vis)] = self._vis
            self._mat, self._vis = mat, vis
        self._mat[uid] = vec
        self._vis[uid] = visible
        self._surface_cache = None

    def unit(self, uid: int) -> MemoryUnit:
        try:
            return self.units[uid]
        except KeyError:
            raise BankError(f"unknown unit id {uid!r}") from None

    def __contains__(self, uid: object) -> bool:
        return uid in self.units

    def __len__(self) -> int:
        return len(self.units)

    def set_visibility(self, uid: int, visible: bool) -> None:
        unit = self.unit(uid)
        if unit.visible != visible:
            unit.visible = visible
            self._vis[uid] = visible
            self._surface_cache = None
            self._lines.pop(uid, None)

    def set_descriptor(self, uid: int, summary: str, keywords: Sequence[str]) -> None:
        unit = self.unit(uid)
        unit.summary = summary
        unit.keywords = list(keywords)
        self.stale.add(uid)
        self._lines.pop(uid, None)

    def set_embedding(self, uid: int, embedding: Sequence[float] | np.ndarray) -> None:
        unit = self.unit(uid)
        vec = np.asarray(embedding, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise BankError(f"embedding has shape {vec.shape}, expected ({self.dim},)")
        vec = vec.copy()
        vec.flags.writeable = False
        unit.embedding = vec
        self._mat[uid] = vec
        self.stale.discard(uid)
        self._lines.pop(uid, None)
        if unit.visible:
            self._surface_cache = None

    def visible_surface(self) -> list[int]:
        # ids are allocated monotonically, so id order is insertion order
        return [uid for uid, u in self.units.items() if u.visible]

    def archived(self) -> list[int]:
        return [uid for uid, u in self.units.items() if not u.visible]

    def surface_index(self) -> tuple[list[int], np.ndarray, np.ndarray]:
        """Cached (ids, embedding matrix, row norms) over the visible surface."""
        if self._surface_cache is None:
            rows = np.flatnonzero(self._vis)
            ids = rows.tolist()
            matrix = self._mat[rows]
            norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
            self._surface_cache = (ids, matrix, norms)
        return self._surface_cache

    def invalidate_index(self) -> None:
        self._surface_cache = None

    # ------------------------------------------------------------------ edges

    def add_edge(self, src: int, dst: int, edge_type: EdgeType | str) -> bool:
        """Insert an edge; returns False when it already existed."""
        edge_type = EdgeType.parse(edge_type)
        if src == dst:
            raise BankError(f"self-loop on unit {src}")
        s, d = self.unit(src), self.unit(dst)
        if (
            edge_type is EdgeType.TEMPORAL
            and s.timestamp is not None
            and d.timestamp is not None
            and not d.timestamp < s.timestamp
        ):
            raise BankError(f"temporal edge {src}->{dst} does not point backwards in time")
        targets = self._out[src].setdefault(edge_type, set())
        if dst in targets:
            return False
        targets.add(dst)
        self._in[dst].setdefault(edge_type, set()).add(src)
        self._n_edges += 1
        self._edge_lines.pop(src, None)
        return True

    def remove_edge(self, src: int, dst: int, edge_type: EdgeType | str) -> bool:
        edge_type = EdgeType.parse(edge_type)
        targets = self._out.get(src, {}).get(edge_type)
        if not targets or dst not in targets:
            return False
        targets.discard(dst)
        self._in[dst][edge_type].discard(src)
        self._n_edges -= 1
        self._edge_lines.pop(src, None)
        return True

    def has_edge(self, src: int, dst: int, edge_type: EdgeType | str) -> bool:
        return dst in self._out.get(src, {}).get(EdgeType.parse(edge_type), ())

    def out_ids(self, uid: int, edge_type: EdgeType) -> set[int]:
        """Live view of the out-neighbor id set for one edge type (do not mutate)."""
        return self._out[uid].get(edge_type, set())

    def in_ids(self, uid: int, edge_type: EdgeType) -> set[int]:
        return self._in[uid].get(edge_type, set())

    def out_degree(self, uid: int, edge_type: EdgeType) -> int:
        return len(self._out[uid].get(edge_type, ()))

    def out_neighbors(
        self, uid: int, edge_type: EdgeType | str | None = None
    ) -> list[tuple[int, EdgeType]]:
        self.unit(uid)
        if edge_type is not None:
            et = EdgeType.parse(edge_type)
            return [(d, et) for d in sorted(self._out[uid].get(et, ()))]
        out = [(d, et) for et, dsts in self._out[uid].items() for d in dsts]
        out.sort(key=lambda pair: (pair[1].value, pair[0]))
        return out

    def edges(self) -> list[TypedEdge]:
        out = [
            TypedEdge(src, dst, et)
            for src, by_type in self._out.items()
            for et, dsts in by_type.items()
            for dst in dsts
        ]
        out.sort(key=lambda e: (e.src, e.dst, e.edge_type.value))
        return out

    @property
    def n_edges(self) -> int:
        return self._n_edges

    # -------------------------------------------------------------- distances

    def hop_distance(
        self,
        src: int,
        dst: int,
        edge_types: Iterable[EdgeType | str] | None = None,
    ) -> int:
        """Directed BFS hop count, or UNREACHABLE."""
        self.unit(src)
        self.unit(dst)
        if src == dst:
            return 0
        types = None if edge_types is None else {EdgeType.parse(t) for t in edge_types}
        seen = {src}
        queue = deque([(src, 0)])
        while queue:
            node, dist = queue.popleft()
            for et, dsts in self._out[node].items():
                if types is not None and et not in types:
                    continue
                for nxt in dsts:
                    if nxt == dst:
                        return dist + 1
                    if nxt not in seen:
                        seen.add(nxt)
                        queue.append((nxt, dist + 1))
        return UNREACHABLE

    def distances_from_surface(
        self, edge_types: Iterable[EdgeType | str] | None = None
    ) -> dict[int, int]:
        """Multi-source BFS from every visible unit; maps reached id -> hops."""
        types = None if edge_types is None else {EdgeType.parse(t) for t in edge_types}
        dist = {uid: 0 for uid in self.visible_surface()}
        queue = deque(dist)
        while queue:
            node = queue.popleft()
            d = dist[node] + 1
            for et, dsts in self._out[node].items():
                if types is not None and et not in types:
                    continue
                for nxt in dsts:
                    if nxt not in dist:
                        dist[nxt] = d
                        queue.append(nxt)
        return dist

    # ------------------------------------------------------------- invariants

    def cap_violations(self) -> list[Violation]:
        found = []
        for uid in self.units:
            for et in (EdgeType.TEMPORAL, EdgeType.SEMANTIC, EdgeType.SIBLING):
                cap = self.caps.cap_for(et)
                deg = self.out_degree(uid, et)
                if cap is not None and deg > cap:
                    found.append(Violation("cap", f"unit {uid}", f"{et.value} out-degree {deg} > {cap}"))
        return found

    def check_invariants(self) -> list[Violation]:
        found = self.cap_violations()
        reach = self.distances_from_surface()
        for uid, unit in self.units.items():
            if not unit.visible and uid not in reach:
                found.append(Violation("orphan", f"unit {uid}", "archived and unreachable from the visible surface"))
            if unit.embedding.shape != (self.dim,):
                found.append(Violation("dimension", f"unit {uid}"))
        for edge in self.edges():
            if edge.src == edge.dst:
                found.append(Violation("self_loop", f"edge {edge.src}->{edge.dst}"))
            if edge.edge_type is EdgeType.TEMPORAL:
                ts, td = self.units[edge.src].timestamp, self.units[edge.dst].timestamp
                if ts is not None and td is not None and not td < ts:
                    found.append(Violation("temporal_order", f"edge {edge.src}->{edge.dst}"))
        return found

    # ---------------------------------------------------------- serialization

    def dumps(self) -> str:
        header = {
            "format": self.SNAPSHOT_FORMAT,
            "dim": self.dim,
            "next_id": self.next_id,
            "caps": self.caps.to_record(),
            "stale": sorted(self.stale),
        }
        parts = [_dump_line(header)]
        parts.extend(self._unit_line(uid) for uid in sorted(self.units))
        parts.extend(self._edge_block(src) for src in sorted(self._out))
        return "".join(parts)

    def _unit_line(self, uid: int) -> str:
        line = self._lines.get(uid)
        if line is None:
            line = self._lines[uid] = _dump_line(self.units[uid].to_record())
        return line

    def _edge_block(self, src: int) -> str:
        block = self._edge_lines.get(src)
        if block is None:
            # same bytes as _dump_line(e.to_record()); edge fields are ints and fixed type names
            pairs = sorted((d, et.value) for et, dsts in self._out[src].items() for d in dsts)
            block = self._edge_lines[src] = "".join(
                f'{{"src":{src},"dst":{d},"type":"{name}"}}\n' for d, name in pairs
            )
        return block

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    @classmethod
    def loads(cls, text: str) -> MemoryBank:
        lines = text.splitlines()
        if not lines:
            raise SnapshotError(1, "empty snapshot (missing header)")
        try:
            header = json.loads(lines[0])
        except ValueError as exc:
            raise SnapshotError(1, f"invalid JSON: {exc}") from None
        if not isinstance(header, dict) or header.get("format") != cls.SNAPSHOT_FORMAT:
            raise SnapshotError(1, "missing or unsupported snapshot header")
        try:
            caps = DegreeCaps(**header["caps"])
            bank = cls(int(header["dim"]), caps)
            next_id = int(header["next_id"])
            stale = {int(x) for x in header.get("stale", [])}
        except (KeyError, TypeError, ValueError, BankError) as exc:
            raise SnapshotError(1, f"bad header: {exc}") from None
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                raise SnapshotError(lineno, "blank line")
            try:
                rec = json.loads(line)
            except ValueError as exc:
                raise SnapshotError(lineno, f"invalid JSON: {exc}") from None
            if not isinstance(rec, dict):
                raise SnapshotError(lineno, "record is not an object")
            try:
                if set(rec) == {"src", "dst", "type"}:
                    bank._load_edge(rec)
                elif "id" in rec:
                    bank._load_unit(rec)
                else:
                    raise SnapshotError(lineno, "unrecognized record")
            except SnapshotError:
                raise
            except (KeyError, TypeError, ValueError, BankError) as exc:
                raise SnapshotError(lineno, str(exc)) from None
        if next_id < bank.next_id:
            raise SnapshotError(1, "next_id below highest unit id")
        bank.next_id = next_id
        bank.stale = stale
        return bank

    def _load_unit(self, rec: dict) -> None:
        expected = {"id", "evidence", "summary", "keywords", "embedding", "timestamp", "visible", "unit_type", "source_ids"}
        if set(rec) != expected:
            raise ValueError(f"unit fields {sorted(rec)} != {sorted(expected)}")
        uid = rec["id"]
        if not isinstance(uid, int) or isinstance(uid, bool) or uid < 0 or uid in self.units:
            raise ValueError(f"bad or duplicate unit id {uid!r}")
        vec = np.asarray(rec["embedding"], dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"embedding of unit {uid} has wrong dimension")
        vec.flags.writeable = False
        self.units[uid] = MemoryUnit(
            id=uid,
            evidence=str(rec["evidence"]),
            summary=str(rec["summary"]),
            keywords=[str(k) for k in rec["keywords"]],
            embedding=vec,
            timestamp=None if rec["timestamp"] is None else float(rec["timestamp"]),
            visible=bool(rec["visible"]),
            unit_type=UnitType(rec["unit_type"]),
            source_ids=[str(s) for s in rec["source_ids"]],
        )
        self._out[uid] = {}
        self._in[uid] = {}
        self.next_id = max(self.next_id, uid + 1)
        self._store_row(uid, vec, self.units[uid].visible)

    def _load_edge(self, rec: dict) -> None:
        # snapshots may legitimately hold edges whose timestamps were edited later;
        # insert without re-checking temporal order
        src, dst, et = rec["src"], rec["dst"], EdgeType.parse(rec["type"])
        if src not in self.units or dst not in self.units:
            raise ValueError(f"edge {src}->{dst} references unknown unit")
        if src == dst:
            raise ValueError(f"self-loop on unit {src}")
        targets = self._out[src].setdefault(et, set())
        if dst in targets:
            raise ValueError(f"duplicate edge {src}->{dst} {et.value}")
        targets.add(dst)
        self._in[dst].setdefault(et, set()).add(src)
        self._n_edges += 1
        self._edge_lines.pop(src, None)

    def copy(self) -> MemoryBank:
        return MemoryBank.loads(self.dumps())
