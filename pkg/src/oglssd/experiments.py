"""Multi-run comparisons on shared seeds: the ablation table and the ordering check."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path
from statistics import mean
from typing import Sequence

from .errors import ConfigError
from .metrics import read_metrics
from .plotting import emit_plots, write_table_svg
from .trainer import TrainConfig, base_key, config_hash, load_data, prepare_base, run

log = logging.getLogger(__name__)

# name -> overrides applied to the shared config; "base" is the untouched warmup model
VARIANTS: dict[str, dict | None] = {
    "ogls": {"method": "ogls", "G": 8},
    "ogls_g4": {"method": "ogls", "G": 4},
    "pmt": {"method": "pmt", "G": 8},
    "pos_only": {"method": "pos_only", "G": 8},
    "opsd": {"method": "opsd"},
    "base": None,
}
LABELS = {
    "ogls": "OGLS-SD (G=8)",
    "ogls_g4": "OGLS-SD (G=4)",
    "pmt": "Pos. mean teacher",
    "pos_only": "Pos.-only steering",
    "opsd": "OPSD",
    "base": "Base",
}


def variant_config(cfg: TrainConfig, name: str, seed: int) -> TrainConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}")
    over = VARIANTS[name] or {}
    return dataclasses.replace(cfg, seed=seed, **over)


def run_variant(cfg: TrainConfig, name: str, seed: int, root: Path, base_path: Path, say=log.info) -> dict:
    """Run (or reuse a finished run with the same config hash) and return its report."""
    vcfg = variant_config(cfg, name, seed)
    out = root / f"{name}-s{seed}"
    rep_path = out / "report.json"
    if rep_path.is_file():
        rep = json.loads(rep_path.read_text())
        if rep.get("config_hash") == config_hash(vcfg) and rep.get("steps_done") == vcfg.steps:
            say(f"reusing {out}")
            return rep
    return run(vcfg, out, base_path=base_path, run_id=f"{name}-s{seed}-{config_hash(vcfg)[:8]}", say=say)


def ablate(
    cfg: TrainConfig,
    root: str | Path,
    variants: Sequence[str] = tuple(VARIANTS),
    seeds: Sequence[int] = (0, 1, 2),
    say=log.info,
) -> dict:
    """Train every variant for every seed from one shared base and rank final Avg@k."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; valid: {', '.join(VARIANTS)}")
    base_path = root / f"base-{base_key(cfg)}.pt"
    _, base_info = prepare_base(cfg, load_data(cfg.data), base_path, say)

    per_run: dict[str, list[dict]] = {}
    base_eval = None
    for v in variants:
        if v == "base":
            continue
        for s in seeds:
            rep = {**run_variant(cfg, v, s, root, base_path, say), "seed": s}
            per_run.setdefault(v, []).append(rep)
            base_eval = base_eval or rep.get("base")
    if "base" in variants:
        if base_eval is None:
            rep = run(dataclasses.replace(cfg, steps=0), root / "base-eval", base_path=base_path, run_id="base-eval", say=say)
            base_eval = rep["base"]
        per_run["base"] = [
            {"final": base_eval, "best": {"avg_at_k": base_eval["avg_at_k"], "step": 0}, "seed": s,
             "config_hash": base_key(cfg), "curve": [], "base": base_eval}
            for s in seeds
        ]

    rows = []
    for v, reps in per_run.items():
        finals = [r["final"]["avg_at_k"] for r in reps]
        bests = [r["best"]["avg_at_k"] for r in reps]
        rows.append({
            "variant": v,
            "label": LABELS[v],
            "mean_final": mean(finals),
            "mean_best": mean(bests),
            "per_seed_final": finals,
            "mean_format_rate": mean(r["final"]["answer_format_rate"] for r in reps),
            "config_hashes": sorted({r["config_hash"] for r in reps}),
        })
    rows.sort(key=lambda r: -r["mean_final"])
    curves = {v: {str(r["seed"]): r["curve"] for r in reps} for v, reps in per_run.items() if v != "base"}
    summary = {"base_info": base_info, "base": base_eval, "seeds": list(seeds), "rows": rows, "curves": curves}
    write_summary(root, summary, per_run)
    return summary


def write_summary(root: Path, summary: dict, per_run: dict[str, list[dict]]) -> None:
    (root / "ablation.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    header = ["rank", "variant", "mean final Avg@k", "mean best Avg@k", "per-seed final", "config hash"]
    body = []
    for i, r in enumerate(summary["rows"], 1):
        body.append([
            str(i), r["label"], f"{100 * r['mean_final']:.2f}", f"{100 * r['mean_best']:.2f}",
            " ".join(f"{100 * f:.1f}" for f in r["per_seed_final"]), ",".join(h[:8] for h in r["config_hashes"]),
        ])
    with (root / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(body)
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(row) + " |" for row in body]
    (root / "ablation.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    write_table_svg(root / "ablation.svg", header, body)

    rows = []
    for v, reps in per_run.items():
        if v == "base":
            continue
        for rep in reps:
            path = root / f"{v}-s{rep['seed']}" / "metrics.jsonl"
            if path.is_file():
                rows += [{**r, "label": f"{v}-s{rep['seed']}"} for r in read_metrics(path)]
    emit_plots(rows, root / "plots")


def ordering_check(summary: dict, margin_opsd: float = 0.02, min_gain: float = 0.05, stability: float = 0.03) -> dict:
    """Evaluate the ordering claims on an ablation summary containing ogls, opsd and base."""
    by = {r["variant"]: r for r in summary["rows"]}
    base = summary["base"]["avg_at_k"]
    ogls, opsd = by["ogls"], by["opsd"]
    checks = {
        "ogls_ge_opsd": ogls["mean_final"] >= opsd["mean_final"],
        "opsd_ge_base_minus_2": opsd["mean_final"] >= base - margin_opsd,
        "ogls_gain_ge_5": ogls["mean_final"] - base >= min_gain,
        "ogls_stable": ogls["mean_best"] - ogls["mean_final"] <= stability,
    }
    return {"base": base, "ogls": ogls["mean_final"], "opsd": opsd["mean_final"],
            "ogls_best": ogls["mean_best"], "checks": checks, "passed": all(checks.values())}


def ablation_check(summary: dict, tie: float = 0.01) -> dict:
    """OGLS(G=8) >= OGLS(G=4) >= each of PMT and Pos-Only, ties within ``tie``."""
    by = {r["variant"]: r["mean_final"] for r in summary["rows"]}
    checks = {
        "g8_ge_g4": by["ogls"] + tie >= by["ogls_g4"],
        "g4_ge_pmt": by["ogls_g4"] + tie >= by["pmt"],
        "g4_ge_pos_only": by["ogls_g4"] + tie >= by["pos_only"],
    }
    return {"means": by, "checks": checks, "passed": all(checks.values())}
