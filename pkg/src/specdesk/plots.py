"""Matplotlib figures rendered next to the CSV/JSON reports.

All figures are written to files (Agg backend); nothing is shown
interactively.
"""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import RunReport

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def plot_pos_acc(runs: list[tuple[str, RunReport]], path) -> None:
    """Per-position conditional acceptance rate, one line per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (label, report) in enumerate(runs):
        depth = report.counters["depth"]
        xs, ys = [], []
        for pos in range(2, depth + 1):
            val = report.pos_acc[pos - 2]
            if val is not None:
                xs.append(pos)
                ys.append(val)
        ax.plot(xs, ys, marker="o", label=label, color=_COLORS[i % len(_COLORS)])
    ax.set_xlabel("draft position")
    ax.set_ylabel("pos-acc  P(A_i | A_{i-1})")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def plot_timing(runs: list[tuple[str, RunReport]], path) -> None:
    """Stacked draft/verify/commit totals per run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [label for label, _ in runs]
    draft = np.array([r.timing["draft_ms"] for _, r in runs])
    verify = np.array([r.timing["verify_ms"] for _, r in runs])
    commit = np.array([r.timing["commit_ms"] for _, r in runs])
    xs = np.arange(len(runs))
    ax.bar(xs, draft, label="draft", color=_COLORS[0])
    ax.bar(xs, verify, bottom=draft, label="verify", color=_COLORS[1])
    ax.bar(xs, commit, bottom=draft + verify, label="commit", color=_COLORS[2])
    ax.set_xticks(xs, labels, rotation=20, ha="right")
    ax.set_ylabel("total phase time (ms)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)


def plot_depth_sweep(rows: list[dict], path) -> None:
    """tau and throughput against draft depth, one line pair per method."""
    methods = sorted({r["label"] for r in rows if not r.get("error")})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    for i, method in enumerate(methods):
        sub = sorted((r for r in rows if r["label"] == method and not r.get("error")),
                     key=lambda r: r["depth"])
        depths = [r["depth"] for r in sub]
        ax1.plot(depths, [r["tau"] for r in sub], marker="o", label=method,
                 color=_COLORS[i % len(_COLORS)])
        ax2.plot(depths, [r["tokens_per_second"] for r in sub], marker="s",
                 label=method, color=_COLORS[i % len(_COLORS)])
    ax1.set_xlabel("draft depth")
    ax1.set_ylabel("average acceptance length")
    ax2.set_xlabel("draft depth")
    ax2.set_ylabel("tokens / second")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=140)
    plt.close(fig)
