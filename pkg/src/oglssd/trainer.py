"""Training loops: warmup pretraining, OGLS-SD, and the baselines/ablations.

Randomness is keyed by ``(seed, purpose, step, index)`` tuples rather than by
advancing generator state, so a run resumed from a checkpoint draws exactly
the batches and rollouts the uninterrupted run would have drawn.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch

from . import diagnostics
from .errors import ConfigError, NumericError
from .guidance import SteeringConfig, lambda_at, poll_teacher, steered_from_poll, subsample_pool
from .losses import (
    LossConfig,
    adaptive_eta,
    grpo_lite_loss,
    opsd_loss,
    pmt_loss,
    pos_only_steer_loss,
    pos_tail_loss,
    response_logits,
    rollout_steer_loss,
    sft_loss,
    steering_loss,
    total_loss,
    zero,
)
from .rollout import RolloutGroup, partition, sample_groups
from .seqmodel import (
    ModelDims,
    OptState,
    TinyGPT,
    Vocab,
    backward,
    clone_model,
    freeze,
    init_model,
    init_opt_state,
    load_checkpoint,
    optimizer_step,
    param_digest,
    sample_batch,
    save_checkpoint,
)
from .metrics import MetricsWriter
from .tasks import Dataset, Problem, load_dataset, make_splits, render_prompt, sample_trace, verify

log = logging.getLogger(__name__)

METHODS = ("ogls", "opsd", "pmt", "pos_only", "grpo", "sft", "routed")
GROUP_METHODS = ("ogls", "pmt", "pos_only", "grpo", "routed")
METRICS_SCHEMA = 1

# purpose tags for keyed seeds
_BATCH, _ROLLOUT, _POOL, _EVAL, _WARMUP = 1, 2, 3, 4, 5


@dataclass
class DataConfig:
    family: str = "arith"
    n_train: int = 2000
    n_eval: int = 200
    n_warmup: int = 2000
    k_min: int = 2
    k_max: int = 4
    moduli: tuple[int, ...] = (5, 7, 11)
    seed: int = 7
    train_path: str | None = None
    eval_path: str | None = None


@dataclass
class ModelConfig:
    d: int = 64
    L: int = 2
    W: int = 512
    n_heads: int = 2
    init_seed: int = 0


@dataclass
class WarmupConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 3e-3
    guided_frac: float = 0.5
    copy_frac: float = 0.5
    recheck_frac: float = 0.2
    shuffle_frac: float = 0.0
    seed: int = 0


@dataclass
class TrainConfig:
    method: str = "ogls"
    steps: int = 300
    batch_prompts: int = 4
    G: int = 8
    opsd_rollouts: int = 1
    temperature: float = 1.0
    max_len: int = 256
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    max_grad_norm: float = 1.0
    seed: int = 0
    eval_every: int = 50
    eval_k: int = 8
    eval_problems: int | None = None
    eval_seed: int = 1234
    ckpt_every: int = 50
    stop_after: int | None = None
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.method in ("ogls", "pmt", "pos_only", "routed") and self.G < 2:
            raise ConfigError(f"method {self.method} needs G >= 2 to form contrastive pools")
        if self.method == "grpo" and self.G < 2:
            raise ConfigError("grpo needs G >= 2")
        if self.steps < 0 or self.batch_prompts < 1:
            raise ConfigError("steps must be >= 0 and batch_prompts >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")

    def ramp_steps(self) -> int:
        return self.steering.ramp_steps if self.steering.ramp_steps > 0 else max(1, self.steps // 2)


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_hash(cfg) -> str:
    """Short digest of everything that affects results (``stop_after`` excluded)."""
    d = config_to_dict(cfg)
    d.pop("stop_after", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    step: int
    student: TinyGPT
    teacher: TinyGPT
    opt: OptState
    teacher_digest: str
    history: list[dict] = field(default_factory=list)
    base_info: dict = field(default_factory=dict)


def new_state(base: TinyGPT) -> TrainState:
    teacher = freeze(clone_model(base))
    student = clone_model(base)
    return TrainState(0, student, teacher, init_opt_state(student), param_digest(teacher))


# -- warmup -----------------------------------------------------------------

def warmup_example(problem: Problem, vocab: Vocab, cfg: WarmupConfig, rng: random.Random) -> tuple[list[int], list[int]]:
    """One warmup ``(context, target)`` pair.

    Unguided examples show a trace (in a shuffled reduction order with
    probability ``shuffle_frac``) with an occasional ``recheck`` line. Guided examples prefix a reference trace of the same
    problem; their targets copy it or re-derive it and never recheck.
    """
    x = render_prompt(problem, vocab)

    def order():
        return rng if rng.random() < cfg.shuffle_frac else None

    if rng.random() >= cfg.guided_frac:
        trace = sample_trace(problem, order(), recheck=rng.random() < cfg.recheck_frac)
        return x, vocab.encode(trace) + [vocab.eos]
    g = sample_trace(problem, order())
    trace = g if rng.random() < cfg.copy_frac else sample_trace(problem, order())
    ctx = x + [vocab.guide_open] + vocab.encode(g) + [vocab.guide_close]
    return ctx, vocab.encode(trace) + [vocab.eos]


def sequence_nll(model: TinyGPT, contexts, targets, pad_id: int) -> torch.Tensor:
    """Token-mean NLL of ``targets`` after ``contexts`` over a batch."""
    rows = response_logits(model, contexts, targets, pad_id)
    logp = torch.cat([torch.log_softmax(r, -1) for r in rows])
    idx = torch.as_tensor([t for y in targets for t in y], dtype=torch.long)
    return -logp.gather(1, idx.unsqueeze(1)).mean()


def pretrain_base(
    problems: Sequence[Problem],
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: WarmupConfig,
    progress: Callable[[int, float, TinyGPT], None] | None = None,
) -> TinyGPT:
    """Brief supervised warmup standing in for a pretrained backbone."""
    dims = ModelDims(V=vocab.size, d=model_cfg.d, L=model_cfg.L, W=model_cfg.W, n_heads=model_cfg.n_heads)
    model = init_model(dims, model_cfg.init_seed)
    if cfg.steps == 0:
        return model
    opt = init_opt_state(model)
    problems = list(problems)
    for step in range(cfg.steps):
        rng = random.Random(f"{_WARMUP}:{cfg.seed}:{step}")
        batch = [problems[rng.randrange(len(problems))] for _ in range(cfg.batch)]
        pairs = [warmup_example(p, vocab, cfg, rng) for p in batch]
        loss = sequence_nll(model, [c for c, _ in pairs], [t for _, t in pairs], vocab.pad)
        lr = cfg.lr * min(1.0, (step + 1) / 50) * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        optimizer_step(model, backward(loss, model), opt, lr, max_grad_norm=1.0)
        if progress is not None:
            progress(step, loss.item(), model)
    return model


# -- evaluation -------------------------------------------------------------

def evaluate(
    params: TinyGPT,
    problems: Sequence[Problem],
    vocab: Vocab,
    k: int = 8,
    budget: int = 256,
    seed: int = 1234,
    temperature: float = 1.0,
    chunk: int = 512,
) -> dict:
    """Avg@k, answer-format rate, mean length, and reflection-marker rates."""
    rows, seeds, owners = [], [], []
    for i, p in enumerate(problems):
        prompt = render_prompt(p, vocab)
        for j in range(k):
            rows.append(prompt)
            seeds.append((seed, _EVAL, i, j))
            owners.append(i)
    outs: list[list[int]] = []
    for s in range(0, len(rows), chunk):
        outs += sample_batch(params, rows[s : s + chunk], budget, temperature, seeds[s : s + chunk], vocab.eos, vocab.pad)
    correct = [0] * len(problems)
    fmt = 0
    texts = []
    for i, toks in zip(owners, outs):
        text = vocab.decode(toks)
        v = verify(problems[i], text)
        correct[i] += v.r
        fmt += v.format_ok
        texts.append(text)
    n = max(len(outs), 1)
    markers = diagnostics.marker_frequency(texts, diagnostics.EVAL_MARKERS, n_tokens=sum(len(o) for o in outs))
    return {
        "avg_at_k": sum(c / k for c in correct) / max(len(problems), 1),
        "answer_format_rate": fmt / n,
        "mean_len": sum(len(o) for o in outs) / n,
        "marker_rate_per_1k": markers["rate_per_1k"],
        "marker_counts": markers["counts"],
        "k": k,
    }


# -- one training step ------------------------------------------------------

def batch_indices(n_train: int, batch: int, seed: int, step: int) -> list[int]:
    rng = random.Random(f"{_BATCH}:{seed}:{step}")
    return rng.sample(range(n_train), min(batch, n_train))


def rollout_seeds(seed: int, step: int, n: int) -> list[tuple[int, ...]]:
    return [(seed, _ROLLOUT, step, b) for b in range(n)]


@dataclass
class PromptTerms:
    total: torch.Tensor
    steer: torch.Tensor = field(default_factory=zero)
    pos: torch.Tensor = field(default_factory=zero)
    eta: float = 0.0


def _student_rows(state: TrainState, groups: Sequence[RolloutGroup], vocab: Vocab) -> list[list[torch.Tensor]]:
    prompts, responses, index = [], [], []
    for gi, g in enumerate(groups):
        for j, y in enumerate(g.rollouts):
            if y.length:
                prompts.append(g.prompt_tokens)
                responses.append(list(y.tokens))
                index.append((gi, j))
    out: list[list[torch.Tensor | None]] = [[None] * g.G for g in groups]
    if prompts:
        rows = response_logits(state.student, prompts, responses, vocab.pad)
        for (gi, j), r in zip(index, rows):
            out[gi][j] = r
    return out


def ogls_prompt_terms(
    state: TrainState,
    group: RolloutGroup,
    rows: Sequence[torch.Tensor | None],
    vocab: Vocab,
    cfg: TrainConfig,
    lam: float,
    pool_seed,
    counters: dict,
) -> PromptTerms:
    """Algorithm-1 loss for one prompt: steering on incorrect rollouts plus positive tail."""
    problem = group.problem
    sol = problem.solution_trace if cfg.steering.include_solution else None
    pools = partition(group, sol)
    pools.positive = subsample_pool(pools.positive, cfg.steering.max_pool, pool_seed + (0,))
    pools.negative = subsample_pool(pools.negative, cfg.steering.max_pool, pool_seed + (1,))
    steer_terms = []
    for j, y in enumerate(group.rollouts):
        if y.r == 1:
            counters["n_skipped_correct"] += 1
            continue
        if not pools.positive or not pools.negative or not y.length:
            counters["n_skipped_empty_pool"] += 1
            continue
        poll = poll_teacher(state.teacher, vocab, group.prompt_tokens, y.tokens, cfg.loss.H,
                            pools.positive, pools.negative, cfg.steering.guide_tail)
        teacher = steered_from_poll(poll, lam)
        steer_terms.append(rollout_steer_loss(rows[j], teacher, cfg.loss, counters))
        counters["n_steered_rollouts"] += 1
    steer = steering_loss(steer_terms)
    pos, n_pos = pos_tail_loss([r for r in rows], group.rollouts, cfg.loss)
    counters["n_pos_tail_rollouts"] += n_pos
    eta = adaptive_eta(cfg.loss.eta0, group.acc)
    bd = total_loss(steer, pos, eta)
    return PromptTerms(total=bd.total, steer=steer, pos=pos, eta=eta)


def _opsd_rollout_loss(state, group, j, rows, vocab, cfg, counters):
    y = group.rollouts[j]
    poll = poll_teacher(state.teacher, vocab, group.prompt_tokens, y.tokens, cfg.loss.H,
                        [group.problem.solution_trace], (), cfg.steering.guide_tail)
    return opsd_loss(rows[j], poll.positive[0], cfg.loss, counters)


def baseline_prompt_terms(
    state: TrainState,
    group: RolloutGroup | None,
    rows,
    vocab: Vocab,
    cfg: TrainConfig,
    lam: float,
    pool_seed,
    counters: dict,
    problem: Problem | None = None,
) -> PromptTerms:
    method = cfg.method
    if method == "sft":
        x = render_prompt(problem, vocab)
        trace = vocab.encode(problem.solution_trace) + [vocab.eos]
        r = response_logits(state.student, [x], [trace], vocab.pad)[0]
        return PromptTerms(total=sft_loss(r, trace))

    if method == "grpo":
        return PromptTerms(total=grpo_lite_loss(rows, group.rollouts, cfg.loss.eps_std))

    if method == "opsd":
        terms = []
        for j, y in enumerate(group.rollouts):
            if y.length:
                terms.append(_opsd_rollout_loss(state, group, j, rows, vocab, cfg, counters))
                counters["n_steered_rollouts"] += 1
        return PromptTerms(total=steering_loss(terms))

    if method == "routed":
        failed = []
        for j, y in enumerate(group.rollouts):
            if y.r == 0 and y.length:
                failed.append(_opsd_rollout_loss(state, group, j, rows, vocab, cfg, counters))
                counters["n_steered_rollouts"] += 1
        succ_mask = [y.r == 1 for y in group.rollouts]
        grpo_part = grpo_lite_loss(rows, group.rollouts, cfg.loss.eps_std, include=succ_mask)
        return PromptTerms(total=steering_loss(failed) + grpo_part)

    sol = group.problem.solution_trace if cfg.steering.include_solution else None
    pools = partition(group, sol)
    positive = subsample_pool(pools.positive, cfg.steering.max_pool, pool_seed + (0,))

    if method == "pmt":
        terms = []
        for j, y in enumerate(group.rollouts):
            if not positive or not y.length:
                counters["n_skipped_empty_pool"] += 1
                continue
            poll = poll_teacher(state.teacher, vocab, group.prompt_tokens, y.tokens, cfg.loss.H,
                                positive, (), cfg.steering.guide_tail)
            terms.append(pmt_loss(rows[j], poll.positive, cfg.loss, counters))
            counters["n_steered_rollouts"] += 1
        return PromptTerms(total=steering_loss(terms))

    if method == "pos_only":
        terms = []
        for j, y in enumerate(group.rollouts):
            if y.r == 1:
                counters["n_skipped_correct"] += 1
                continue
            if not positive or not y.length:
                counters["n_skipped_empty_pool"] += 1
                continue
            poll = poll_teacher(state.teacher, vocab, group.prompt_tokens, y.tokens, cfg.loss.H,
                                positive, (), cfg.steering.guide_tail)
            terms.append(pos_only_steer_loss(rows[j], poll.anchor, poll.positive, lam, cfg.loss, counters))
            counters["n_steered_rollouts"] += 1
        steer = steering_loss(terms)
        pos, n_pos = pos_tail_loss(rows, group.rollouts, cfg.loss)
        counters["n_pos_tail_rollouts"] += n_pos
        eta = adaptive_eta(cfg.loss.eta0, group.acc)
        return PromptTerms(total=steer + eta * pos, steer=steer, pos=pos, eta=eta)

    raise ConfigError(f"unknown method {method!r}")


def train_step(state: TrainState, train: Sequence[Problem], vocab: Vocab, cfg: TrainConfig) -> dict:
    """One optimizer step of ``cfg.method``; returns the metrics row."""
    t0 = time.perf_counter()
    step = state.step
    lam = lambda_at(dataclasses.replace(cfg.steering, ramp_steps=cfg.ramp_steps()), step)
    idx = batch_indices(len(train), cfg.batch_prompts, cfg.seed, step)
    batch = [train[i] for i in idx]
    counters = dict(n_clipped_terms=0, n_steered_rollouts=0, n_skipped_correct=0,
                    n_skipped_empty_pool=0, n_pos_tail_rollouts=0)

    groups: list[RolloutGroup | None] = [None] * len(batch)
    rows: list = [None] * len(batch)
    if cfg.method != "sft":
        G = cfg.opsd_rollouts if cfg.method == "opsd" else cfg.G
        groups = sample_groups(state.student, batch, vocab, G, cfg.temperature, cfg.max_len,
                               rollout_seeds(cfg.seed, step, len(batch)))
        rows = _student_rows(state, groups, vocab)

    terms = []
    for b, problem in enumerate(batch):
        pool_seed = (cfg.seed, _POOL, step, b)
        if cfg.method == "ogls":
            terms.append(ogls_prompt_terms(state, groups[b], rows[b], vocab, cfg, lam, pool_seed, counters))
        else:
            terms.append(baseline_prompt_terms(state, groups[b], rows[b], vocab, cfg, lam, pool_seed,
                                               counters, problem=problem))
    loss = torch.stack([t.total for t in terms]).mean()

    row = {
        "kind": "train",
        "schema": METRICS_SCHEMA,
        "step": step + 1,
        "method": cfg.method,
        "loss": loss.item(),
        "steer": torch.stack([t.steer for t in terms]).mean().item(),
        "pos": torch.stack([t.pos for t in terms]).mean().item(),
        "eta": sum(t.eta for t in terms) / len(terms),
        "lambda": lam,
        **counters,
    }
    if groups[0] is not None:
        all_r = [y for g in groups for y in g.rollouts]
        row["acc"] = sum(y.r for y in all_r) / len(all_r)
        row["format_rate"] = sum(y.verdict.format_ok for y in all_r) / len(all_r)
        row["mean_len"] = sum(y.length for y in all_r) / len(all_r)
        row["n_rollouts"] = len(all_r)

    if not math.isfinite(row["loss"]):
        row.update(update_applied=False, rejected=True, grad_norm=float("nan"))
        log.warning("step %d: nonfinite loss, update skipped", step + 1)
    else:
        grads = backward(loss, state.student)
        rep = optimizer_step(state.student, grads, state.opt, cfg.lr, cfg.betas,
                             weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
        row.update(update_applied=rep.applied, rejected=rep.rejected, grad_norm=rep.grad_norm)
    state.step += 1
    row["wall_time"] = time.perf_counter() - t0
    return row


# -- checkpoints ------------------------------------------------------------

def save_state(path: str | Path, state: TrainState, vocab: Vocab, cfg_hash: str) -> None:
    save_checkpoint(
        path,
        state.student,
        vocab,
        state.opt,
        state.step,
        extra={
            "teacher": {k: v.clone() for k, v in state.teacher.state_dict().items()},
            "teacher_digest": state.teacher_digest,
            "history": json.dumps(state.history),
            "base_info": json.dumps(state.base_info),
            "config_hash": cfg_hash,
        },
    )


def load_state(path: str | Path) -> tuple[TrainState, Vocab, str]:
    ck = load_checkpoint(path)
    teacher = clone_model(ck.model)
    teacher.load_state_dict(ck.extra["teacher"])
    freeze(teacher)
    state = TrainState(
        step=ck.step,
        student=ck.model,
        teacher=teacher,
        opt=ck.opt_state or init_opt_state(ck.model),
        teacher_digest=ck.extra["teacher_digest"],
        history=json.loads(ck.extra["history"]),
        base_info=json.loads(ck.extra.get("base_info", "{}")),
    )
    return state, ck.vocab, ck.extra.get("config_hash", "")


def train_loop(
    state: TrainState,
    train: Sequence[Problem],
    eval_set: Sequence[Problem],
    vocab: Vocab,
    cfg: TrainConfig,
    emit: Callable[[dict], None] | None = None,
    checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run from ``state.step`` to ``cfg.steps`` (or ``cfg.stop_after``) with periodic eval."""
    cfg.validate()
    last = cfg.steps if cfg.stop_after is None else min(cfg.steps, cfg.stop_after)
    evals = list(eval_set)[: cfg.eval_problems] if cfg.eval_problems else list(eval_set)

    def record(row):
        state.history.append(row)
        if emit is not None:
            emit(row)

    if state.step == 0 and not any(r.get("kind") == "eval" for r in state.history):
        record(eval_row(state, evals, vocab, cfg))
    while state.step < last:
        record(train_step(state, train, vocab, cfg))
        if param_digest(state.teacher) != state.teacher_digest:
            raise NumericError("teacher parameters changed during training")
        if cfg.eval_every and (state.step % cfg.eval_every == 0 or state.step == cfg.steps):
            record(eval_row(state, evals, vocab, cfg))
        if checkpoint is not None and cfg.ckpt_every and (state.step % cfg.ckpt_every == 0 or state.step == last):
            checkpoint(state)
    return state


def eval_row(state: TrainState, evals: Sequence[Problem], vocab: Vocab, cfg: TrainConfig) -> dict:
    res = evaluate(state.student, evals, vocab, cfg.eval_k, cfg.max_len, cfg.eval_seed, cfg.temperature)
    return {"kind": "eval", "schema": METRICS_SCHEMA, "step": state.step, "method": cfg.method, **res}


# -- orchestration ----------------------------------------------------------

TARGET_BAND = (0.30, 0.70)


def load_data(cfg: DataConfig) -> dict[str, list[Problem]]:
    """Generated splits, with train/eval replaced by files when paths are given."""
    sp = make_splits(cfg.n_train, cfg.n_eval, cfg.seed, (cfg.k_min, cfg.k_max), cfg.moduli, cfg.family, cfg.n_warmup)
    out = {k: list(v.problems) for k, v in sp.items()}
    if cfg.train_path:
        out["train"] = list(load_dataset(cfg.train_path).problems)
    if cfg.eval_path:
        out["eval"] = list(load_dataset(cfg.eval_path).problems)
    if not out.get("warmup"):
        out["warmup"] = out["train"]
    return out


def base_key(cfg: TrainConfig) -> str:
    blob = json.dumps(config_to_dict(cfg)["data"] | {"model": config_to_dict(cfg)["model"],
                      "warmup": config_to_dict(cfg)["warmup"]}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def prepare_base(cfg: TrainConfig, data: dict, path: str | Path | None = None, say=log.info) -> tuple[TinyGPT, dict]:
    """Load the warmup base from ``path`` if present, else pretrain (and save there)."""
    vocab = Vocab()
    if path is not None and Path(path).is_file():
        ck = load_checkpoint(path)
        return ck.model, dict(ck.extra.get("base_info", {}))
    t0 = time.perf_counter()
    model = pretrain_base(data["warmup"], vocab, cfg.model, cfg.warmup)
    probe = data["train"][:200]
    info = {
        "warmup_steps": cfg.warmup.steps,
        "train_acc": evaluate(model, probe, vocab, 8, cfg.max_len, cfg.eval_seed + 1)["avg_at_k"],
        "warmup_seconds": time.perf_counter() - t0,
        "key": base_key(cfg),
    }
    lo, hi = TARGET_BAND
    if not lo <= info["train_acc"] <= hi:
        hint = "more" if info["train_acc"] < lo else "fewer"
        say(f"base train accuracy {info['train_acc']:.3f} is outside [{lo}, {hi}]; try {hint} warmup.steps")
    if path is not None:
        save_checkpoint(path, model, vocab, None, 0, extra={"base_info": info})
    return model, info


def _report(state: TrainState, cfg: TrainConfig, run_id: str, base_info: dict) -> dict:
    evals = [r for r in state.history if r["kind"] == "eval"]
    curve = [{"step": r["step"], "avg_at_k": r["avg_at_k"], "answer_format_rate": r["answer_format_rate"]} for r in evals]
    rep = {
        "run_id": run_id,
        "config_hash": config_hash(cfg),
        "method": cfg.method,
        "steps_done": state.step,
        "steps": cfg.steps,
        "base_info": base_info,
        "teacher_digest": state.teacher_digest,
        "curve": curve,
    }
    if evals:
        base, final = evals[0], evals[-1]
        best = max(evals, key=lambda r: r["avg_at_k"])
        rep.update(
            base={k: base[k] for k in ("avg_at_k", "answer_format_rate", "marker_rate_per_1k")},
            final={k: final[k] for k in ("avg_at_k", "answer_format_rate", "marker_rate_per_1k", "mean_len")},
            best={"step": best["step"], "avg_at_k": best["avg_at_k"]},
            delta_vs_base=final["avg_at_k"] - base["avg_at_k"],
            final_minus_best=final["avg_at_k"] - best["avg_at_k"],
        )
    return rep


def run(
    cfg: TrainConfig,
    out_dir: str | Path,
    base_path: str | Path | None = None,
    resume: str | Path | None = None,
    run_id: str | None = None,
    say=log.info,
) -> dict:
    """Pretrain or load the base, train ``cfg.steps`` steps, and write the run directory.

    The directory receives ``config.yaml``, ``metrics.jsonl``, ``checkpoint.pt``
    and ``report.json``; every artifact carries the run id and config hash.
    """
    from .config import dump_config  # config imports this module

    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    run_id = run_id or f"{cfg.method}-{chash[:8]}-s{cfg.seed}"
    dump_config(cfg, out / "config.yaml")
    vocab = Vocab()
    data = load_data(cfg.data)

    if resume is not None:
        state, _, saved_hash = load_state(resume)
        if saved_hash and saved_hash != chash:
            raise ConfigError(f"checkpoint {resume} was written by config {saved_hash}, not {chash}")
    else:
        base, base_info = prepare_base(cfg, data, base_path or out / "base.pt", say)
        state = new_state(base)
        state.base_info = base_info

    with MetricsWriter(out / "metrics.jsonl", run_id, chash, mode="w") as writer:
        for row in state.history:
            writer.write(row)

        def emit(row):
            writer.write(row)
            if row["kind"] == "eval":
                say(f"[{run_id}] step {row['step']}: avg@{row['k']} = {row['avg_at_k']:.4f}")

        def ckpt(st):
            save_state(out / "checkpoint.pt", st, vocab, chash)

        if not state.history:
            first = eval_row(state, list(data["eval"])[: cfg.eval_problems] if cfg.eval_problems else data["eval"], vocab, cfg)
            state.history.append(first)
            emit(first)
        train_loop(state, data["train"], data["eval"], vocab, cfg, emit=emit, checkpoint=ckpt)

    report = _report(state, cfg, run_id, state.base_info)
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    return report
