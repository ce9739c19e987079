"""Training objectives.

Every distillation loss here shares one core: a forward KL from a constant
target distribution to the student's next-token distribution, averaged over
the first ``H_j = min(|y|, H)`` rollout positions. The methods differ only in
how the target is built (steered, privileged, positive-mean, positive-only).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ConfigError, ContractError, PoolError
from .guidance import mean_logits, positive_only_logits
from .seqmodel import TinyGPT, batch_forward

LOG_EPS = math.log(1e-12)
CLIP_MODES = ("summand", "position")


@dataclass
class LossConfig:
    H: int = 64
    K: int = 16
    T_max_pos: int = 128
    tau: float = 0.05
    eta0: float = 0.05
    clip_mode: str = "summand"
    opsd_clip: bool = False
    eps_std: float = 1e-6

    def __post_init__(self):
        if self.H < 1:
            raise ConfigError(f"H must be >= 1, got {self.H}")
        for name in ("K", "T_max_pos", "tau", "eta0", "eps_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.clip_mode not in CLIP_MODES:
            raise ConfigError(f"clip_mode must be one of {CLIP_MODES}, got {self.clip_mode!r}")


@dataclass
class LossBreakdown:
    steer: torch.Tensor
    pos: torch.Tensor
    eta: float
    total: torch.Tensor
    counters: dict[str, int] = field(default_factory=dict)


def zero() -> torch.Tensor:
    return torch.zeros((), dtype=torch.float64)


def response_logits(
    model: TinyGPT, prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]], pad_id: int = 0
) -> list[torch.Tensor]:
    """Per response, the ``(|y|, V)`` logit rows predicting each of its tokens.

    One teacher-forced forward over the padded batch; differentiable.
    """
    seqs = [list(x) + list(y) for x, y in zip(prompts, responses)]
    logits = batch_forward(model, seqs, pad_id)
    return [logits[i, len(x) - 1 : len(x) - 1 + len(y)] for i, (x, y) in enumerate(zip(prompts, responses))]


def _check_normalized(p: torch.Tensor, name: str) -> None:
    err = float((p.detach().sum(-1) - 1).abs().max())
    if err > 1e-4:
        raise ContractError(f"{name} is not normalized (max |sum - 1| = {err:.3g})")


def kl_summands(p_T: torch.Tensor, log_q: torch.Tensor) -> torch.Tensor:
    """Per-vocab terms ``p_T (log p_T - log q)`` with ``0 log 0 = 0`` and ``log q >= log 1e-12``."""
    return torch.special.xlogy(p_T, p_T) - p_T * log_q.clamp(min=LOG_EPS)


def clip_pointwise(terms: torch.Tensor, tau: float, counters: dict | None = None) -> torch.Tensor:
    """Clamp each summand to ``[-tau, tau]``; gradients vanish beyond the bound. ``tau == 0`` disables."""
    if tau == 0:
        return terms
    if counters is not None:
        counters["n_clipped_terms"] = counters.get("n_clipped_terms", 0) + int((terms.detach().abs() > tau).sum())
    return terms.clamp(-tau, tau)


def divergence(
    p_T: torch.Tensor,
    student_logits: torch.Tensor,
    tau: float = 0.0,
    mode: str = "summand",
    counters: dict | None = None,
) -> torch.Tensor:
    """Per-position (optionally clipped) forward KL from ``p_T`` to ``softmax(student_logits)``."""
    terms = kl_summands(p_T.detach(), torch.log_softmax(student_logits, dim=-1))
    if tau == 0:
        return terms.sum(-1)
    if mode == "summand":
        return clip_pointwise(terms, tau, counters).sum(-1)
    return clip_pointwise(terms.sum(-1), tau, counters)


def forward_kl(p_T: torch.Tensor, p_theta: torch.Tensor) -> torch.Tensor:
    """``sum_v p_T(v) (log p_T(v) - log p_theta(v))``; ``p_T`` is treated as a constant."""
    _check_normalized(p_T, "p_T")
    _check_normalized(p_theta, "p_theta")
    return kl_summands(p_T.detach(), torch.log(p_theta)).sum(-1)


def distill_loss(
    student_rows: torch.Tensor,
    target_probs: torch.Tensor,
    tau: float = 0.0,
    mode: str = "summand",
    counters: dict | None = None,
) -> torch.Tensor:
    """Mean over the target's horizon of the per-position divergence."""
    Hj = target_probs.shape[0]
    if student_rows.shape[0] < Hj:
        raise ContractError(f"student covers {student_rows.shape[0]} positions, target needs {Hj}")
    return divergence(target_probs, student_rows[:Hj], tau, mode, counters).mean()


def rollout_steer_loss(student_rows: torch.Tensor, teacher, cfg: LossConfig, counters: dict | None = None) -> torch.Tensor:
    """Clipped forward KL from the steered teacher along one incorrect rollout.

    ``student_rows`` are the student's logits for every token of the rollout,
    computed without privileged guidance.
    """
    expected = min(student_rows.shape[0], cfg.H)
    if teacher.horizon != expected:
        raise ContractError(f"teacher horizon {teacher.horizon} != min(|y|, H) = {expected}")
    return distill_loss(student_rows, teacher.probs, cfg.tau, cfg.clip_mode, counters)


def steering_loss(rollout_losses: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average over the incorrect rollouts that received a steered teacher; zero if none."""
    if not rollout_losses:
        return zero()
    return torch.stack(list(rollout_losses)).mean()


def tail_nll(student_rows: torch.Tensor, tokens: Sequence[int], K: int) -> torch.Tensor:
    """Summed NLL of the last ``K`` tokens of a response."""
    n = len(tokens)
    start = max(0, n - K)
    logp = torch.log_softmax(student_rows[start:n], dim=-1)
    idx = torch.as_tensor(list(tokens[start:n]), dtype=torch.long)
    return -logp.gather(1, idx.unsqueeze(1)).sum()


def pos_tail_loss(
    student_rows: Sequence[torch.Tensor], rollouts: Sequence, cfg: LossConfig
) -> tuple[torch.Tensor, int]:
    """Positive-tail SFT over short correct rollouts; returns ``(loss, |J+|)``."""
    terms = [
        tail_nll(rows, y.tokens, cfg.K)
        for rows, y in zip(student_rows, rollouts)
        if y.r == 1 and y.length <= cfg.T_max_pos and y.length > 0
    ]
    if not terms:
        return zero(), 0
    return torch.stack(terms).mean(), len(terms)


def adaptive_eta(eta0: float, acc: float) -> float:
    if not 0.0 <= acc <= 1.0:
        raise ContractError(f"accuracy must lie in [0, 1], got {acc}")
    return eta0 * (1.0 - acc)


def total_loss(steer: torch.Tensor, pos: torch.Tensor, eta: float, counters: dict | None = None) -> LossBreakdown:
    return LossBreakdown(steer=steer, pos=pos, eta=eta, total=steer + eta * pos, counters=dict(counters or {}))


def opsd_loss(student_rows: torch.Tensor, privileged_rows: torch.Tensor, cfg: LossConfig, counters: dict | None = None) -> torch.Tensor:
    """Distill the teacher conditioned on the dataset solution; clipping only if ``cfg.opsd_clip``."""
    tau = cfg.tau if cfg.opsd_clip else 0.0
    return distill_loss(student_rows, torch.softmax(privileged_rows.detach(), -1), tau, cfg.clip_mode, counters)


def positive_mean_distribution(member_logits: Sequence[torch.Tensor]) -> torch.Tensor:
    """Average of member *distributions* (softmax first, then mean)."""
    if not member_logits:
        raise PoolError("positive pool is empty")
    probs = [torch.softmax(z.detach(), -1) for z in member_logits]
    total = probs[0].clone()
    for p in probs[1:]:
        total = total + p
    return total / len(probs)


def pmt_loss(student_rows: torch.Tensor, positive_logits: Sequence[torch.Tensor], cfg: LossConfig, counters: dict | None = None) -> torch.Tensor:
    target = positive_mean_distribution(positive_logits)
    return distill_loss(student_rows, target, cfg.tau, cfg.clip_mode, counters)


def pos_only_steer_loss(
    student_rows: torch.Tensor,
    anchor_logits: torch.Tensor,
    positive_logits: Sequence[torch.Tensor],
    lam: float,
    cfg: LossConfig,
    counters: dict | None = None,
) -> torch.Tensor:
    z_T = positive_only_logits(anchor_logits.detach(), mean_logits(positive_logits), lam)
    return distill_loss(student_rows, torch.softmax(z_T, -1), cfg.tau, cfg.clip_mode, counters)


def group_advantages(rewards: Sequence[float], eps_std: float = 1e-6) -> torch.Tensor:
    r = torch.as_tensor(list(rewards), dtype=torch.float64)
    return (r - r.mean()) / (r.std(unbiased=False) + eps_std)


def mean_logprob(student_rows: torch.Tensor, tokens: Sequence[int]) -> torch.Tensor:
    logp = torch.log_softmax(student_rows[: len(tokens)], dim=-1)
    idx = torch.as_tensor(list(tokens), dtype=torch.long)
    return logp.gather(1, idx.unsqueeze(1)).mean()


def grpo_lite_loss(
    student_rows: Sequence[torch.Tensor],
    rollouts: Sequence,
    eps_std: float = 1e-6,
    include: Sequence[bool] | None = None,
) -> torch.Tensor:
    """``-(1/G) sum_j A_j * mean_t log pi(y_jt)`` with group-normalized advantages.

    ``include`` restricts the sum to a subset of rollouts while keeping the
    group statistics and the ``1/G`` normalization (used by the routed hybrid).
    """
    G = len(rollouts)
    if G < 2:
        raise ContractError("GRPO needs at least two rollouts per group")
    adv = group_advantages([y.r for y in rollouts], eps_std)
    terms = []
    for j, (rows, y) in enumerate(zip(student_rows, rollouts)):
        if include is not None and not include[j]:
            continue
        if y.length == 0:
            continue
        terms.append(adv[j] * mean_logprob(rows, y.tokens))
    if not terms:
        return zero()
    return -torch.stack(terms).sum() / G


def sft_loss(student_rows: torch.Tensor, trace_tokens: Sequence[int]) -> torch.Tensor:
    """Mean NLL of the dataset trace (terminated by eos) given the prompt."""
    if len(trace_tokens) == 0:
        raise ContractError("SFT trace is empty")
    return -mean_logprob(student_rows, trace_tokens)
