"""Typed-graph long-term memory with non-destructive offline consolidation."""

from topomem.atc import GateThresholds, consolidate, write_online
from topomem.bank import ConsolidationBuffer, DegreeCaps, EdgeType, MemoryBank, UnitType
from topomem.embedding import StubEmbedder, cosine, stub_embed
from topomem.engine import Config, Engine, Store
from topomem.gateway import BackendConfig, Gateway
from topomem.retrieval import QueryBudget, query

__version__ = "0.1.0"

__all__ = [
    "BackendConfig",
    "Config",
    "ConsolidationBuffer",
    "DegreeCaps",
    "EdgeType",
    "Engine",
    "GateThresholds",
    "Gateway",
    "MemoryBank",
    "QueryBudget",
    "StubEmbedder",
    "Store",
    "UnitType",
    "consolidate",
    "cosine",
    "query",
    "stub_embed",
    "write_online",
]
