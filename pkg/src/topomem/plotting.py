"""Report figures. Uses the non-interactive Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from topomem.audit import CostMetrics  # noqa: E402
from topomem.recoverability import RecoverabilityReport  # noqa: E402


def coverage_figure(rep: RecoverabilityReport, path: str | os.PathLike) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    if rep.curve.points:
        hs = [h for h, _ in rep.curve.points]
        ax.step(hs, [c for _, c in rep.curve.points], where="post", label="all edges", color="C0")
        ax.step(hs, [c for _, c in rep.curve_nu.points], where="post", label="version edges only",
                color="C1", linestyle=":")
        if rep.H_095 is not None:
            ax.axvline(rep.H_095, color="grey", linestyle="--", linewidth=1, label=f"H_0.95 = {rep.H_095}")
        ax.legend(loc="lower right", fontsize=8)
    else:
        ax.text(0.5, 0.5, "no archived units", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("hop budget H")
    ax.set_ylabel("coverage")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("Archived-unit coverage from the visible surface", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def amortization_figure(cost: CostMetrics, path: str | os.PathLike) -> None:
    labels = ["online / turn", "offline / event", "amortized offline / turn"]
    values = [cost.online_latency_mean, cost.event_latency_mean, cost.amortized_offline_s]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    bars = ax.bar(labels, [v * 1000.0 for v in values], color=["C0", "C3", "C2"])
    for bar, v in zip(bars, values):
        ax.annotate(f"{v * 1000.0:.2f}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("latency (ms)")
    ax.set_title(f"Realized interval I = {cost.realized_interval:.2f} turns", fontsize=9)
    ax.tick_params(axis="x", labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
