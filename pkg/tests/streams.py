"""Synthetic turn streams and bank builders shared by the tests."""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np

from topomem.bank import EdgeType, MemoryBank
from topomem.engine import Config, Engine, Turn

WORDS = (
    "apple river mountain coffee guitar violin dentist invoice garden tennis python lecture "
    "harbor bicycle museum recipe passport kitchen sunset pharmacy laptop theater orchard "
    "library festival airport vitamin jacket ceramic blanket lantern meadow compass canyon "
    "engine pottery lobster saffron glacier marathon sapphire tractor volcano whistle"
).split()


def vec(*xs: float, dim: int | None = None) -> np.ndarray:
    out = np.zeros(dim or len(xs))
    out[: len(xs)] = xs
    return out


def sentence(rng: random.Random, n: int = 6) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(n))


def marker_stream(rng: random.Random, n_turns: int, session_len: int = 5) -> list[Turn]:
    """Turns seeded with split markers, exact repeats and revised restatements."""
    turns: list[Turn] = []
    session = 0
    in_session: list[str] = []
    t = 1_600_000_000.0
    for i in range(n_turns):
        if i and i % session_len == 0:
            session += 1
            in_session = []
        t += rng.choice((1.0, 2.0, 60.0))
        roll = rng.random()
        if roll < 0.15 and in_session:
            text = rng.choice(in_session)  # duplicate: merge candidate
        elif roll < 0.30 and in_session:
            text = rng.choice(in_session).replace(" [REVISED]", "") + " [REVISED]"
        elif roll < 0.45:
            text = sentence(rng) + "\n---\n" + sentence(rng)
        else:
            text = sentence(rng)
        in_session.append(text)
        ts = None if rng.random() < 0.05 else t
        turns.append(Turn(text, f"s{session}", ts))
    return turns


def run_stream(turns: list[Turn], config: Config | None = None, check=None) -> Engine:
    """Ingest ``turns``; ``check(engine)`` runs after every consolidation."""
    engine = Engine(config or Config(every_sessions=None, every_turns=10))
    seen = 0
    for turn in turns:
        engine.ingest(turn)
        if check is not None and len(engine.reports) > seen:
            seen = len(engine.reports)
            check(engine)
    if len(engine.buffer):
        engine.consolidate(trigger="flush")
        if check is not None:
            check(engine)
    return engine


def random_bank(rng: np.random.Generator, n: int, dim: int = 8, archived: float = 0.3,
                edges: int = 0, integer: bool = False) -> MemoryBank:
    bank = MemoryBank(dim)
    for _ in range(n):
        z = rng.integers(-2, 3, dim).astype(float) if integer else rng.standard_normal(dim)
        ts = None if rng.random() < 0.1 else float(rng.integers(0, 1000))
        bank.create_unit("e", "s", ["k"], z, ts)
    for uid in range(n):
        if rng.random() < archived:
            bank.set_visibility(uid, False)
    types = [EdgeType.SEMANTIC, EdgeType.VERSION, EdgeType.SIBLING, EdgeType.TEMPORAL]
    for _ in range(edges):
        a, b = (int(x) for x in rng.integers(0, n, 2))
        et = types[int(rng.integers(0, 4))]
        if a == b:
            continue
        if et is EdgeType.TEMPORAL:
            ta, tb = bank.unit(a).timestamp, bank.unit(b).timestamp
            if ta is not None and tb is not None and not tb < ta:
                continue
        bank.add_edge(a, b, et)
    return bank


class TableEmbedder:
    """Maps exact descriptor texts to fixed vectors so edits can be traced by hand."""

    def __init__(self, table: dict[str, list[float]], dim: int = 2) -> None:
        self.table = table
        self.dim = dim
        self.calls = 0

    def embed(self, text: str) -> np.ndarray:
        self.calls += 1
        return np.asarray(self.table[text], dtype=np.float64)


def bank_from_dict(layout: dict) -> MemoryBank:
    """Build a bank from {"dim", "units": [...], "edges": [[src, dst, type], ...]}."""
    bank = MemoryBank(layout.get("dim", 2))
    for u in layout["units"]:
        uid = bank.create_unit(u["evidence"], u.get("summary", u["evidence"]), u.get("keywords", []),
                               u["embedding"], u.get("timestamp"), source_ids=u.get("source_ids", []))
        if not u.get("visible", True):
            bank.set_visibility(uid, False)
    for src, dst, et in layout.get("edges", []):
        bank.add_edge(src, dst, et)
    return bank


FIXTURES = Path(__file__).parent / "fixtures"


def golden_case(name: str):
    """Run one operator golden trace; returns (bank, edit summary, embedder, expected)."""
    from topomem.executor import apply_plan, parse_plan

    case = json.loads((FIXTURES / "golden_ops.json").read_text())[name]
    bank = bank_from_dict(case["bank"])
    embedder = TableEmbedder(case["embeddings"], bank.dim)
    plan = parse_plan(case["op"], case["plan"])
    summary = apply_plan(bank, case["op"], case["target"], plan, embedder)
    return bank, summary, embedder, case["expected"]


def golden_mismatches(bank: MemoryBank, summary, embedder, expected: dict) -> list[str]:
    """Field-by-field comparison of a golden trace; empty when it reproduces exactly."""
    problems = []
    got = summary.to_record()
    for key, want in expected["summary"].items():
        if got[key] != want:
            problems.append(f"summary.{key}: {got[key]} != {want}")
    if bank.visible_surface() != expected["visible"]:
        problems.append(f"visible: {bank.visible_surface()} != {expected['visible']}")
    for uid, want in expected["units"].items():
        rec = bank.unit(int(uid)).to_record()
        rec.pop("id")
        if rec != want:
            problems.append(f"unit {uid}: {rec} != {want}")
    edges = [[e.src, e.dst, e.edge_type.value] for e in bank.edges()]
    if edges != expected["edges"]:
        problems.append(f"edges: {edges} != {expected['edges']}")
    if embedder.calls != expected["embed_calls"]:
        problems.append(f"embed calls: {embedder.calls} != {expected['embed_calls']}")
    if bank.check_invariants():
        problems.append(f"invariants: {bank.check_invariants()}")
    return problems
