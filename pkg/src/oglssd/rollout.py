"""On-policy group sampling, outcome labels, and guidance pools."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError
from .seqmodel import TinyGPT, Vocab, sample_batch
from .tasks import Problem, VerdictRecord, render_prompt, verify


@dataclass(frozen=True)
class Rollout:
    tokens: tuple[int, ...]
    text: str
    verdict: VerdictRecord

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def r(self) -> int:
        return self.verdict.r


@dataclass
class RolloutGroup:
    problem: Problem
    prompt_tokens: list[int]
    rollouts: list[Rollout]

    @property
    def G(self) -> int:
        return len(self.rollouts)

    @property
    def rewards(self) -> list[int]:
        return [y.r for y in self.rollouts]

    @property
    def acc(self) -> float:
        return group_accuracy(self)


@dataclass
class GuidancePools:
    positive: list[str] = field(default_factory=list)
    negative: list[str] = field(default_factory=list)


SeedLike = int | Sequence[int]


def _seed_tuple(seed: SeedLike) -> tuple[int, ...]:
    return (int(seed),) if isinstance(seed, int) else tuple(int(s) for s in seed)


def rollout_seed(seed: SeedLike, j: int) -> tuple[int, ...]:
    """Per-rollout seed; numpy's SeedSequence hashes the tuple."""
    return _seed_tuple(seed) + (int(j),)


def sample_groups(
    policy: TinyGPT,
    problems: Sequence[Problem],
    vocab: Vocab,
    G: int,
    temperature: float,
    max_len: int,
    seeds: Sequence[SeedLike],
) -> list[RolloutGroup]:
    """``G`` verified rollouts for each problem, sampled in one batch.

    Rollout ``j`` of problem ``i`` depends only on ``(policy, problem, seeds[i], j)``.
    """
    if G < 1:
        raise ConfigError(f"G must be >= 1, got {G}")
    prompts = [render_prompt(p, vocab) for p in problems]
    rows, row_seeds = [], []
    for prompt, seed in zip(prompts, seeds):
        for j in range(G):
            rows.append(prompt)
            row_seeds.append(rollout_seed(seed, j))
    outs = sample_batch(policy, rows, max_len, temperature, row_seeds, vocab.eos, vocab.pad)
    groups = []
    for i, (problem, prompt) in enumerate(zip(problems, prompts)):
        rollouts = []
        for toks in outs[i * G : (i + 1) * G]:
            text = vocab.decode(toks)
            rollouts.append(Rollout(tuple(toks), text, verify(problem, text)))
        groups.append(RolloutGroup(problem, prompt, rollouts))
    return groups


def sample_group(
    policy: TinyGPT,
    problem: Problem,
    vocab: Vocab,
    G: int,
    temperature: float,
    max_len: int,
    seed: SeedLike,
) -> RolloutGroup:
    return sample_groups(policy, [problem], vocab, G, temperature, max_len, [seed])[0]


def partition(group: RolloutGroup, solution: str | None = None) -> GuidancePools:
    """Correct rollouts (plus the dataset solution when given) vs incorrect ones, order kept."""
    pools = GuidancePools()
    for y in group.rollouts:
        (pools.positive if y.r == 1 else pools.negative).append(y.text)
    if solution is not None:
        pools.positive.append(solution)
    return pools


def group_accuracy(group: RolloutGroup) -> float:
    if not group.rollouts:
        return 0.0
    return sum(y.r for y in group.rollouts) / len(group.rollouts)


def dump_rollouts(path: str | Path, groups: Iterable[RolloutGroup], step: int | None = None) -> None:
    """Append one line per rollout: problem_id, j, text, r, format_ok, length."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for g in groups:
            for j, y in enumerate(g.rollouts):
                rec = {
                    "problem_id": g.problem.id,
                    "j": j,
                    "text": y.text,
                    "r": y.r,
                    "format_ok": y.verdict.format_ok,
                    "length": y.length,
                }
                if step is not None:
                    rec["step"] = step
                fh.write(json.dumps(rec) + "\n")
