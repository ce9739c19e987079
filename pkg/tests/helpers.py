"""Builders shared by several test modules."""

import torch

from oglssd.guidance import GuidancePools, build_steered_teacher, subsample_pool
from oglssd.losses import pos_tail_loss, response_logits, rollout_steer_loss
from oglssd.rollout import Rollout, RolloutGroup
from oglssd.tasks import Problem, VerdictRecord, render_prompt, verify


def problem(expr="((2+3)*4)", m=5, answer=None, solution=None):
    from oracles import mod_eval

    ans = str(mod_eval(expr, m)) if answer is None else answer
    sol = solution if solution is not None else f"Step: {expr}\nAnswer: {ans}"
    return Problem("t-0", f"Compute {expr} mod {m}.", sol, ans, 2, m, "train")


def rollout(vocab, p, text):
    toks = vocab.encode(text) + [vocab.eos]
    return Rollout(tuple(toks), text, verify(p, text))


def group(vocab, p, texts):
    return RolloutGroup(p, render_prompt(p, vocab), [rollout(vocab, p, t) for t in texts])


def fixed_rollout(tokens, r, text="x"):
    return Rollout(tuple(tokens), text, VerdictRecord(r=r, parsed_answer=None, format_ok=bool(r)))


def manual_prompt_loss(model, teacher, vocab, p, texts, cfg, lam, pool_seed, with_solution=True):
    """Recompute one prompt's objective from the primitives, rollout by rollout."""
    ys = [rollout(vocab, p, t) for t in texts]
    x = render_prompt(p, vocab)
    extra = [p.solution_trace] if with_solution else []
    pools = GuidancePools([y.text for y in ys if y.r] + extra, [y.text for y in ys if not y.r])
    pools.positive = subsample_pool(pools.positive, cfg.steering.max_pool, pool_seed + (0,))
    pools.negative = subsample_pool(pools.negative, cfg.steering.max_pool, pool_seed + (1,))
    rows = [response_logits(model, [x], [list(y.tokens)])[0] for y in ys]
    steer = []
    for y, r in zip(ys, rows):
        if y.r == 0 and pools.positive and pools.negative:
            d = build_steered_teacher(teacher, vocab, pools, x, y.tokens, lam, cfg.loss.H)
            steer.append(rollout_steer_loss(r, d, cfg.loss))
    l_steer = sum(steer) / len(steer) if steer else 0.0
    l_pos, _ = pos_tail_loss(rows, ys, cfg.loss)
    acc = sum(y.r for y in ys) / len(ys)
    return float(torch.as_tensor(l_steer + cfg.loss.eta0 * (1 - acc) * l_pos).detach())
