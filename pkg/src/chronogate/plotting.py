"""
Figures for the simulate and entropy reports.

Figures are built on ``matplotlib.figure.Figure`` directly, without pyplot's
global state, so no display backend is needed.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from matplotlib.figure import Figure

from .dga_lab import SimOutcome, TradeoffRow
from .entropy_guard import StreamReport

FIGSIZE = (6.4, 4.0)


def _new_figure():
    fig = Figure(figsize=FIGSIZE, dpi=100)
    ax = fig.add_subplot(1, 1, 1)
    ax.grid(True, linestyle=":", linewidth=0.6, alpha=0.7)
    return fig, ax


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    return path


def plot_tradeoff(rows: Sequence[TradeoffRow], path, threshold_hours: float | None = None) -> Path:
    fig, ax = _new_figure()
    hours = [r.lead_time.total_seconds() / 3600 for r in rows]
    ax.plot(hours, [r.base_rate for r in rows], marker="o", label="rendezvous rate")
    ax.plot(hours, [r.net_rate for r in rows], marker="s", label="after takedown hazard")
    if threshold_hours is not None:
        ax.axvline(threshold_hours, color="0.4", linestyle="--", linewidth=1, label="age threshold")
    ax.set_xlabel("registration lead time (hours)")
    ax.set_ylabel("attacker success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best", fontsize=8)
    return _save(fig, path)


def plot_rendezvous(outcomes: Sequence[SimOutcome], horizon_days: int, path) -> Path:
    """Cumulative fraction of trials that reached the command server by day."""
    fig, ax = _new_figure()
    days = list(range(1, horizon_days + 1))
    n = len(outcomes)
    reached = [sum(1 for o in outcomes if o.success and o.rendezvous_day <= d) / n for d in days]
    ax.step(days, reached, where="post")
    ax.set_xlabel("day")
    ax.set_ylabel("cumulative rendezvous fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlim(0.5, horizon_days + 0.5)
    return _save(fig, path)


def plot_entropy(report: StreamReport, path) -> Path:
    fig, ax = _new_figure()
    offsets = [w.offset for w in report.windows]
    values = [w.bits_per_byte for w in report.windows]
    colors = ["tab:red" if w.flagged else "tab:blue" for w in report.windows]
    ax.scatter(offsets, values, c=colors, s=12)
    ax.axhline(report.overall.threshold, color="0.4", linestyle="--", linewidth=1)
    ax.set_xlabel("window offset (bytes)")
    ax.set_ylabel("entropy (bits/byte)")
    ax.set_ylim(0, 8.2)
    return _save(fig, path)
