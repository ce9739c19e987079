"""Privileged-context assembly and outcome-guided teacher logit steering.

For a rollout ``y`` of prompt ``x`` the steered teacher logits at position t are

    z_T = z(. | x, y<t) + lam * (mean_{g in P+} z(. | x, g, y<t) - mean_{g in P-} z(. | x, g, y<t))

with every ``z`` produced by the frozen teacher. All outputs here are computed
without autograd and are therefore constants for the student's loss.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ConfigError, ContextWindowError, NumericError, PoolError, ShapeError
from .rollout import GuidancePools
from .seqmodel import TinyGPT, Vocab, batch_forward

DEFAULT_GUIDE_TAIL = 32


@dataclass
class GuidanceContext:
    x: list[int]
    g: list[int]
    g_used: list[int]
    y_prefix: list[int]
    assembled: list[int]

    @property
    def truncated(self) -> bool:
        return self.g_used != self.g

    @property
    def response_start(self) -> int:
        """Index in ``assembled`` of the first rollout token."""
        return len(self.assembled) - len(self.y_prefix)


@dataclass
class SteeringConfig:
    lam_start: float = 1.0
    lam_max: float = 3.0
    ramp_steps: int = 0
    max_pool: int = 8
    include_solution: bool = True
    guide_tail: int = DEFAULT_GUIDE_TAIL

    def __post_init__(self):
        if self.lam_start < 0 or self.lam_max < 0:
            raise ConfigError("steering coefficients must be >= 0")
        if self.lam_start > self.lam_max:
            raise ConfigError(f"lam_start={self.lam_start} exceeds lam_max={self.lam_max}")
        if self.ramp_steps < 0:
            raise ConfigError("ramp_steps must be >= 0")


@dataclass
class SteeredTeacherDist:
    logits: torch.Tensor
    probs: torch.Tensor
    horizon: int


@dataclass
class TeacherPoll:
    """Teacher logits along one rollout: anchor plus one matrix per pool member."""

    anchor: torch.Tensor
    positive: list[torch.Tensor] = field(default_factory=list)
    negative: list[torch.Tensor] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return self.anchor.shape[0]


def assemble_teacher_context(
    x: Sequence[int],
    g: Sequence[int],
    y_prefix: Sequence[int],
    W: int,
    vocab: Vocab,
    tail: int = DEFAULT_GUIDE_TAIL,
) -> GuidanceContext:
    """``x <g> g' </g> y_prefix`` with ``g'`` middle-truncated to fit ``W``.

    Truncation keeps the head of ``g``, one cut marker, and the last ``tail``
    tokens (the final-answer region). ``x`` and ``y_prefix`` are never cut.
    """
    x, g, y_prefix = list(x), list(g), list(y_prefix)
    budget = W - len(x) - len(y_prefix) - 2
    if budget < 0 or len(x) + len(y_prefix) >= W:
        raise ContextWindowError(
            f"prompt ({len(x)}) + rollout prefix ({len(y_prefix)}) leave no room for guidance in W={W}"
        )
    if len(g) <= budget:
        g_used = g
    elif budget == 0:
        g_used = []
    else:
        keep_tail = min(tail, budget - 1)
        keep_head = budget - 1 - keep_tail
        g_used = g[:keep_head] + [vocab.cut] + (g[len(g) - keep_tail :] if keep_tail else [])
    assembled = x + [vocab.guide_open] + g_used + [vocab.guide_close] + y_prefix
    return GuidanceContext(x, g, g_used, y_prefix, assembled)


def horizon(rollout_len: int, H: int) -> int:
    return min(rollout_len, H)


@torch.no_grad()
def poll_teacher(
    teacher: TinyGPT,
    vocab: Vocab,
    x: Sequence[int],
    y: Sequence[int],
    H: int,
    positive: Sequence[str] = (),
    negative: Sequence[str] = (),
    tail: int = DEFAULT_GUIDE_TAIL,
) -> TeacherPoll:
    """Teacher logits predicting ``y[0..H_j-1]`` for the anchor and every pool member.

    All contexts go through one right-padded forward; by causality each row
    equals the logits of its own unpadded context.
    """
    Hj = horizon(len(y), H)
    if Hj < 1:
        raise ShapeError("rollout is empty; nothing to distill")
    x, prefix = list(x), list(y[: Hj - 1])
    W = teacher.dims.W
    if len(x) + len(prefix) > W:
        raise ContextWindowError(f"prompt + rollout horizon ({len(x) + len(prefix)}) exceeds W={W}")
    seqs = [x + prefix]
    starts = [len(x)]
    for text in list(positive) + list(negative):
        ctx = assemble_teacher_context(x, vocab.encode(text), prefix, W, vocab, tail)
        seqs.append(ctx.assembled)
        starts.append(ctx.response_start)
    logits = batch_forward(teacher, seqs, vocab.pad)
    rows = [logits[i, s - 1 : s - 1 + Hj] for i, s in enumerate(starts)]
    n_pos = len(positive)
    return TeacherPoll(anchor=rows[0], positive=rows[1 : 1 + n_pos], negative=rows[1 + n_pos :])


def mean_logits(members: Sequence[torch.Tensor]) -> torch.Tensor:
    if not members:
        raise PoolError("cannot average an empty guidance pool")
    total = members[0].clone()
    for m in members[1:]:
        total = total + m
    return total / len(members)


def pool_mean_logits(
    teacher: TinyGPT,
    vocab: Vocab,
    pool: Sequence[str],
    x: Sequence[int],
    y: Sequence[int],
    H: int,
    tail: int = DEFAULT_GUIDE_TAIL,
) -> torch.Tensor:
    """Arithmetic mean over pool members of teacher logits, shape ``(H_j, V)``."""
    if not pool:
        raise PoolError("cannot average an empty guidance pool")
    poll = poll_teacher(teacher, vocab, x, y, H, positive=pool, tail=tail)
    return mean_logits(poll.positive)


def steer_logits(z0: torch.Tensor, z_pos: torch.Tensor, z_neg: torch.Tensor, lam: float) -> torch.Tensor:
    if not (z0.shape == z_pos.shape == z_neg.shape):
        raise ShapeError(f"logit shapes differ: {tuple(z0.shape)}, {tuple(z_pos.shape)}, {tuple(z_neg.shape)}")
    return z0 + lam * (z_pos - z_neg)


def positive_only_logits(z0: torch.Tensor, z_pos: torch.Tensor, lam: float) -> torch.Tensor:
    """Ablation target: extrapolate from the anchor toward the positive mean only."""
    if z0.shape != z_pos.shape:
        raise ShapeError(f"logit shapes differ: {tuple(z0.shape)}, {tuple(z_pos.shape)}")
    return z0 + lam * (z_pos - z0)


def teacher_distribution(z_T: torch.Tensor) -> SteeredTeacherDist:
    z_T = z_T.detach()
    if not bool(torch.isfinite(z_T).all()):
        raise NumericError("steered teacher logits contain nonfinite values")
    rows = z_T if z_T.dim() == 2 else z_T.unsqueeze(0)
    return SteeredTeacherDist(logits=rows, probs=torch.softmax(rows, dim=-1), horizon=rows.shape[0])


def lambda_at(schedule: SteeringConfig, step: int) -> float:
    """Linear ramp from ``lam_start`` to ``lam_max`` over ``ramp_steps`` optimizer steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.ramp_steps == 0:
        return schedule.lam_max
    frac = min(step / schedule.ramp_steps, 1.0)
    return schedule.lam_start + (schedule.lam_max - schedule.lam_start) * frac


def subsample_pool(pool: Sequence[str], max_pool: int, seed: Sequence[int] | int) -> list[str]:
    """Seeded uniform subsample (order preserved) when the pool exceeds ``max_pool``."""
    pool = list(pool)
    if max_pool <= 0 or len(pool) <= max_pool:
        return pool
    rng = random.Random(repr(seed))
    keep = sorted(rng.sample(range(len(pool)), max_pool))
    return [pool[i] for i in keep]


def build_steered_teacher(
    teacher: TinyGPT,
    vocab: Vocab,
    pools: GuidancePools,
    x: Sequence[int],
    y: Sequence[int],
    lam: float,
    H: int,
    tail: int = DEFAULT_GUIDE_TAIL,
) -> SteeredTeacherDist:
    if not pools.positive or not pools.negative:
        raise PoolError("steering needs both a positive and a negative guidance pool")
    poll = poll_teacher(teacher, vocab, x, y, H, pools.positive, pools.negative, tail)
    return steered_from_poll(poll, lam)


def steered_from_poll(poll: TeacherPoll, lam: float) -> SteeredTeacherDist:
    z_T = steer_logits(poll.anchor, mean_logits(poll.positive), mean_logits(poll.negative), lam)
    return teacher_distribution(z_T)
