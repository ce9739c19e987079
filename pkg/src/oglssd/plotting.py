"""CSV tables and vector-graphics curves from metrics rows."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)

EVAL_METRICS = ("avg_at_k", "answer_format_rate", "marker_rate_per_1k", "mean_len")
TRAIN_METRICS = ("loss", "steer", "acc", "mean_len", "n_clipped_terms")

_SVG_META = {"Date": None, "Creator": None}


def _label(row: dict) -> str:
    return row.get("label") or row.get("run_id") or row.get("method", "run")


def series(rows: Iterable[dict], metric: str, kind: str) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for r in rows:
        if r.get("kind") == kind and isinstance(r.get(metric), (int, float)):
            out[_label(r)].append((int(r["step"]), float(r[metric])))
    return {k: sorted(v) for k, v in sorted(out.items())}


def write_svg(path: Path, curves: dict[str, list[tuple[int, float]]], ylabel: str, title: str = "") -> None:
    plt.rcParams["svg.hashsalt"] = "oglssd"
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, pts in curves.items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def emit_plots(
    rows: Sequence[dict],
    out_dir: str | Path,
    eval_metrics: Sequence[str] = EVAL_METRICS,
    train_metrics: Sequence[str] = TRAIN_METRICS,
) -> list[Path]:
    """One CSV and one overlay SVG per metric; returns the written paths."""
    if not rows:
        log.warning("no metrics rows; nothing to plot")
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, metrics in (("eval", eval_metrics), ("train", train_metrics)):
        for metric in metrics:
            curves = series(rows, metric, kind)
            if not curves:
                continue
            stem = out / f"{kind}_{metric}"
            with stem.with_suffix(".csv").open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["label", "step", metric])
                for label, pts in curves.items():
                    w.writerows([label, s, repr(v)] for s, v in pts)
            write_svg(stem.with_suffix(".svg"), curves, metric, f"{kind}: {metric}")
            written += [stem.with_suffix(".csv"), stem.with_suffix(".svg")]
    return written


def write_table_svg(path: str | Path, header: Sequence[str], body: Sequence[Sequence[str]], title: str = "") -> None:
    """Render a small table (e.g. the ablation ranking) as vector graphics."""
    plt.rcParams["svg.hashsalt"] = "oglssd"
    fig, ax = plt.subplots(figsize=(1.6 * len(header), 0.45 * (len(body) + 2)))
    ax.axis("off")
    tbl = ax.table(cellText=[list(r) for r in body], colLabels=list(header), loc="center")
    tbl.auto_set_font_size(False)
    tbl.set_fontsize(8)
    if title:
        ax.set_title(title, fontsize=9)
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)


def write_shift_svg(path: str | Path, profiles, vocab, vmax: float | None = None) -> None:
    """Two rows per profile (direct, contrastive) colored by shift in nats.

    The color scale is symmetric around zero: ``[-vmax, vmax]`` with ``vmax``
    defaulting to the largest absolute shift across all profiles.
    """
    import numpy as np

    plt.rcParams["svg.hashsalt"] = "oglssd"
    width = max(len(p.tokens) for p in profiles)
    grid = np.full((2 * len(profiles), width), np.nan)
    for i, p in enumerate(profiles):
        grid[2 * i, : len(p.direct)] = p.direct
        grid[2 * i + 1, : len(p.contrastive)] = p.contrastive
    if vmax is None:
        vmax = float(np.nanmax(np.abs(grid))) or 1.0
    fig, ax = plt.subplots(figsize=(max(4, 0.12 * width), 0.35 * len(grid) + 1))
    mesh = ax.pcolormesh(np.ma.masked_invalid(grid), cmap="RdBu", vmin=-vmax, vmax=vmax)
    ax.invert_yaxis()
    ax.set_yticks([r + 0.5 for r in range(len(grid))])
    ax.set_yticklabels([f"{p.problem_id} {c}" for p in profiles for c in ("dir", "ctr")], fontsize=6)
    ax.set_xlabel("response token")
    fig.colorbar(mesh, ax=ax, label="shift (nats)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
