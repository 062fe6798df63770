"""Hop distance of archived units from the visible surface, coverage curves and orphans."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from topomem.bank import UNREACHABLE, BankError, EdgeType, MemoryBank

VERSION_ONLY = (EdgeType.VERSION,)


def hop_map(bank: MemoryBank, edge_types: Iterable[EdgeType] | None = None) -> dict[int, int]:
    """h(v) for every archived unit; UNREACHABLE when no directed path exists."""
    dist = bank.distances_from_surface(edge_types)
    return {v: dist.get(v, UNREACHABLE) for v in bank.archived()}


def h_of(bank: MemoryBank, v: int, edge_types: Iterable[EdgeType] | None = None) -> int:
    if bank.unit(v).visible:
        raise BankError(f"unit {v} is visible; h is defined for archived units only")
    return bank.distances_from_surface(edge_types).get(v, UNREACHABLE)


@dataclass
class CoverageCurve:
    points: list[tuple[int, float]] = field(default_factory=list)
    unreachable_fraction: float = 0.0
    archived: int = 0

    def at(self, H: int) -> float:
        for h, c in self.points:
            if h == H:
                return c
        raise KeyError(H)


def coverage_from_hops(hops: Mapping[int, int], H_max: int) -> CoverageCurve:
    n = len(hops)
    if n == 0:
        return CoverageCurve()
    reached = [h for h in hops.values() if h != UNREACHABLE]
    points = [(H, sum(1 for h in reached if h <= H) / n) for H in range(H_max + 1)]
    return CoverageCurve(points, (n - len(reached)) / n, n)


def coverage(bank: MemoryBank, H_max: int, edge_types: Iterable[EdgeType] | None = None) -> CoverageCurve:
    return coverage_from_hops(hop_map(bank, edge_types), H_max)


def quantile_from_hops(hops: Mapping[int, int], q: float) -> int | None:
    """Minimal H with Cov(H) >= q, or None when unreachable units make q unattainable."""
    n = len(hops)
    if n == 0:
        return None
    reached = sorted(h for h in hops.values() if h != UNREACHABLE)
    need = math.ceil(q * n - 1e-12)
    if need <= 0:
        return 0
    if need > len(reached):
        return None
    return reached[need - 1]


def hop_quantile(bank: MemoryBank, q: float, edge_types: Iterable[EdgeType] | None = None) -> int | None:
    return quantile_from_hops(hop_map(bank, edge_types), q)


def find_orphans(bank: MemoryBank, edge_types: Iterable[EdgeType] | None = None) -> list[int]:
    return sorted(v for v, h in hop_map(bank, edge_types).items() if h == UNREACHABLE)


def lineage_depths(bank: MemoryBank) -> dict[int, int]:
    """Supersession depth per archived unit: 1 + the longest chain of archived ν-parents above it.

    A unit archived directly under a visible representative has depth 1; if that
    representative is later superseded, the unit's depth becomes 2, and so on.
    Mirrors the bound h(v) <= d(v) + 1 with d counting re-archivals of the lineage.
    """
    memo: dict[int, int] = {}

    def depth(v: int, stack: frozenset) -> int:
        if v in memo:
            return memo[v]
        parents = bank.in_ids(v, EdgeType.VERSION)
        best = 0
        for p in sorted(parents):
            if p in stack:
                continue
            best = max(best, 0 if bank.unit(p).visible else depth(p, stack | {p}))
        memo[v] = best + 1
        return memo[v]

    return {v: depth(v, frozenset({v})) for v in bank.archived()}


@dataclass
class RecoverabilityReport:
    curve: CoverageCurve
    curve_nu: CoverageCurve
    median_h: float | None
    H_095: int | None
    median_h_nu: float | None
    H_095_nu: int | None
    orphans: list[int]

    def rows(self) -> list[dict]:
        nu = dict(self.curve_nu.points)
        return [{"H": H, "coverage": c, "coverage_nu": nu.get(H, 0.0)} for H, c in self.curve.points]

    def summary(self) -> dict:
        return {
            "archived": self.curve.archived,
            "median_h": self.median_h,
            "H_095": self.H_095,
            "unreachable_fraction": self.curve.unreachable_fraction,
            "median_h_nu": self.median_h_nu,
            "H_095_nu": self.H_095_nu,
            "unreachable_fraction_nu": self.curve_nu.unreachable_fraction,
            "orphans": self.orphans,
        }


def _median(hops: Mapping[int, int]) -> float | None:
    reached = [h for h in hops.values() if h != UNREACHABLE]
    return float(statistics.median(reached)) if reached else None


def report(bank: MemoryBank, H_max: int = 8) -> RecoverabilityReport:
    full = hop_map(bank)
    nu = hop_map(bank, VERSION_ONLY)
    return RecoverabilityReport(
        curve=coverage_from_hops(full, H_max),
        curve_nu=coverage_from_hops(nu, H_max),
        median_h=_median(full),
        H_095=quantile_from_hops(full, 0.95),
        median_h_nu=_median(nu),
        H_095_nu=quantile_from_hops(nu, 0.95),
        orphans=sorted(v for v, h in full.items() if h == UNREACHABLE),
    )
