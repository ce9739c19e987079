"""``ogls-sd`` command line: data generation, training, evaluation, diagnostics, ablations, plots."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import diagnostics as dg
from .config import dump_config, load_config
from .errors import OGLSError
from .experiments import VARIANTS, ablate, ablation_check, ordering_check
from .metrics import read_metrics, round_trip
from .plotting import emit_plots, write_shift_svg
from .seqmodel import Vocab, load_checkpoint
from .tasks import make_splits, save_dataset
from .trainer import METHODS, TrainConfig, base_key, config_hash, evaluate, load_data, prepare_base, run

log = logging.getLogger("oglssd")

OUT_ENV = "OGLS_OUT"


def out_root(flag: str | None) -> Path:
    return Path(flag or os.environ.get(OUT_ENV, "runs"))


def _config(args) -> TrainConfig:
    overrides = list(args.set or [])
    for flag, key in (("method", "method"), ("steps", "steps"), ("seed", "seed"), ("eval_every", "eval_every"),
                      ("k", "eval_k"), ("eval_problems", "eval_problems"), ("warmup_steps", "warmup.steps")):
        val = getattr(args, flag, None)
        if val is not None:
            overrides.append(f"{key}={val}")
    return load_config(args.config, overrides)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    moduli = tuple(int(m) for m in args.moduli.split(","))
    sp = make_splits(args.train, args.eval, args.seed, (args.k_min, args.k_max), moduli, args.family)
    out = out_root(args.out)
    for name in ("train", "eval"):
        save_dataset(out / f"{name}.jsonl", sp[name])
    manifest = {
        "seed": args.seed, "family": args.family, "k_range": [args.k_min, args.k_max], "moduli": list(moduli),
        "counts": {k: len(sp[k]) for k in ("train", "eval")},
        "sha256": {k: hashlib.sha256((out / f"{k}.jsonl").read_bytes()).hexdigest() for k in ("train", "eval")},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {manifest['counts']['train']} train and {manifest['counts']['eval']} eval problems to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = out_root(args.out) / (args.run_id or f"{cfg.method}-s{cfg.seed}-{config_hash(cfg)[:8]}")
    rep = run(cfg, out, base_path=args.base, resume=args.resume, run_id=args.run_id, say=print)
    if "final" in rep:
        print(f"final avg@{cfg.eval_k} {rep['final']['avg_at_k']:.4f} (base {rep['base']['avg_at_k']:.4f}); report: {out / 'report.json'}")
    return 0


def _load_policy(args, cfg):
    if args.checkpoint == "base":
        path = Path(args.base) if args.base else out_root(args.out) / f"base-{base_key(cfg)}.pt"
        model, _ = prepare_base(cfg, load_data(cfg.data), path, say=print)
        return model, str(path)
    ck = load_checkpoint(args.checkpoint)
    return ck.model, args.checkpoint


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, src = _load_policy(args, cfg)
    data = load_data(cfg.data)
    problems = data[args.split][: args.n_problems] if args.n_problems else data[args.split]
    res = evaluate(model, problems, Vocab(), args.k, cfg.max_len, cfg.eval_seed if args.seed is None else args.seed)
    res.update(checkpoint=src, split=args.split, n_problems=len(problems), config_hash=config_hash(cfg))
    print(json.dumps({k: res[k] for k in ("avg_at_k", "answer_format_rate", "mean_len", "k", "n_problems")}))
    if args.report:
        _write_json(Path(args.report), res)
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    model, src = _load_policy(args, cfg)
    vocab = Vocab()
    data = load_data(cfg.data)
    problems = data[args.split][: args.n_problems]
    profiles, skipped = dg.diagnose(model, vocab, problems, args.lam, n=args.n_ref, seed=args.seed or 0, max_len=cfg.max_len)
    out = out_root(args.out) / (args.run_id or f"diagnose-{config_hash(cfg)[:8]}")
    meta = {"run_id": out.name, "config_hash": config_hash(cfg), "checkpoint": src}
    dg.write_profiles(out / "profiles.jsonl", profiles, meta)
    expressions = args.expressions.split(",") if args.expressions else list(dg.TOY_MARKERS) + list(dg.PAPER_MARKERS)
    table = dg.support_change_table(profiles, expressions, vocab)
    (out / "support_change.md").write_text(
        f"<!-- run {meta['run_id']} config {meta['config_hash']} lambda {args.lam} -->\n" + dg.render_table(table), encoding="utf-8")
    dg.write_table_csv(out / "support_change.csv", table)
    if profiles:
        write_shift_svg(out / "shift_profiles.svg", profiles[: args.max_plot], vocab)
    _write_json(out / "diagnose.json", {**meta, "lambda": args.lam, "n_profiles": len(profiles),
                                        "skipped": len(skipped), "skipped_ids": skipped})
    print(f"{len(profiles)} profiles, {len(skipped)} problems skipped (no correct or no incorrect reference rollout); output in {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = args.only.split(",") if args.only else list(VARIANTS)
    seeds = [int(s) for s in args.seeds.split(",")]
    root = out_root(args.out) / (args.run_id or f"ablate-{config_hash(cfg)[:8]}")
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.yaml")
    summary = ablate(cfg, root, variants, seeds, say=print)
    print((root / "ablation.md").read_text())
    names = {r["variant"] for r in summary["rows"]}
    if {"ogls", "opsd", "base"} <= names:
        print("ordering:", json.dumps(ordering_check(summary)["checks"]))
    if {"ogls", "ogls_g4", "pmt", "pos_only"} <= names:
        print("ablation:", json.dumps(ablation_check(summary)["checks"]))
    return 0


def cmd_plot(args) -> int:
    rows = []
    for p in args.metrics:
        label = Path(p).parent.name
        rows += [{**r, "label": r.get("label") or label} for r in read_metrics(p)]
    written = emit_plots(rows, args.out or "plots")
    print(f"wrote {len(written)} files")
    return 0


def cmd_validate(args) -> int:
    for p in args.metrics:
        n = round_trip(p)
        print(f"{p}: {n} rows ok")
    return 0


# -- parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, train_flags: bool = True) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, e.g. loss.tau=0.1")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--run-id")
    if train_flags:
        p.add_argument("--steps", type=int)
        p.add_argument("--eval-every", type=int)
        p.add_argument("--eval-problems", type=int)
        p.add_argument("--warmup-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ogls-sd", description=__doc__)
    ap.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/eval problem files")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--eval", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=4)
    p.add_argument("--moduli", default="5,7,11")
    p.add_argument("--family", choices=("arith", "reverse"), default="arith")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one method and write a run directory")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--k", type=int, help="samples per problem for Avg@k")
    p.add_argument("--base", help="warmup base checkpoint (created if missing)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="Avg@k and answer-format rate of a checkpoint")
    _common(p, train_flags=False)
    p.add_argument("--checkpoint", required=True, help="checkpoint path, or 'base' for the cached warmup base")
    p.add_argument("--base", help="explicit base checkpoint path when --checkpoint base")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--n-problems", type=int)
    p.add_argument("--report", help="write the full result JSON here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", help="guidance-induced shift profiles and support-change table")
    _common(p, train_flags=False)
    p.add_argument("--checkpoint", default="base")
    p.add_argument("--base")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--split", choices=("eval", "train"), default="eval")
    p.add_argument("--n-problems", type=int, default=20)
    p.add_argument("--n-ref", type=int, default=8, help="reference rollouts sampled per problem")
    p.add_argument("--expressions", help="comma-separated spans for the support-change table")
    p.add_argument("--max-plot", type=int, default=12)
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("ablate", help="run variants on shared seeds and rank them")
    _common(p)
    p.add_argument("--only", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="CSV + SVG curves from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("validate-metrics", help="check and round-trip metrics files")
    p.add_argument("metrics", nargs="+")
    p.set_defaults(fn=cmd_validate)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.fn(args)
    except OGLSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
