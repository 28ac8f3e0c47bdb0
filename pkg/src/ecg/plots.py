"""Figure rendering for evaluation and ablation reports.

Every report-producing CLI path drops a PNG next to its CSV. Rendering is
headless (Agg) and metadata is pinned so repeated runs produce identical
bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_PNG_METADATA = {"Software": "ecg"}


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, format="png", dpi=110, metadata=_PNG_METADATA)
    plt.close(fig)


def em_by_budget(reports: Sequence, path: str | Path) -> None:
    """Line plot of EM against context budget, one line per method."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    methods = sorted({r.method for r in reports})
    for method in methods:
        rows = sorted((r for r in reports if r.method == method), key=lambda r: r.budget)
        ax.plot([r.budget for r in rows], [r.em for r in rows], marker="o", label=method)
    ax.set_xlabel("context budget (document representations)")
    ax.set_ylabel("exact match")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, linestyle=":", alpha=0.6)
    if methods:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def em_by_k(reports: Sequence, path: str | Path) -> None:
    """Line plot of EM against the number of context documents."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    methods = sorted({r.method for r in reports})
    for method in methods:
        rows = sorted((r for r in reports if r.method == method), key=lambda r: r.k)
        ax.plot([r.k for r in rows], [r.em for r in rows], marker="o", label=method)
    ax.set_xlabel("context documents (k)")
    ax.set_ylabel("exact match")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xticks(sorted({r.k for r in reports}))
    ax.grid(True, linestyle=":", alpha=0.6)
    if methods:
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def ablation_bars(rows: Sequence[dict], path: str | Path) -> None:
    """Horizontal bars of EM per ablation combination, flags encoded in labels."""
    fig, ax = plt.subplots(figsize=(6.4, 0.32 * max(8, len(rows)) + 1.2))
    labels = []
    for row in rows:
        bits = "".join(
            "1" if row[flag] else "0"
            for flag in ("contrastive_pretrain", "distillation", "loss_scaling", "weighted_negatives")
        )
        labels.append(bits)
    ems = [row["em"] for row in rows]
    ypos = range(len(rows))
    ax.barh(list(ypos), ems, color="#4878d0")
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(labels, fontsize=7, family="monospace")
    ax.invert_yaxis()
    ax.set_xlabel("exact match")
    ax.set_ylabel("flags: contrastive/distill/scaling/weighted")
    ax.set_xlim(0, 1.02)
    ax.grid(True, axis="x", linestyle=":", alpha=0.6)
    fig.tight_layout()
    _save(fig, path)


def training_curve(history: Sequence, path: str | Path) -> None:
    """Loss components over optimizer steps."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    if history:
        cols = history[0].columns()
        keys = [key for key in cols if key not in ("step",) and cols[key] != ""]
        for key in keys:
            values = [row.columns()[key] for row in history]
            if all(isinstance(v, float) for v in values):
                ax.plot([row.columns()["step"] for row in history], values, label=key, linewidth=1.0)
        ax.legend(fontsize=8)
    ax.set_xlabel("step")
    ax.set_ylabel("value")
    ax.grid(True, linestyle=":", alpha=0.6)
    fig.tight_layout()
    _save(fig, path)
