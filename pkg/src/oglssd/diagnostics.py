"""Guidance-induced log-probability shifts, support-change tables, marker counts.

For a rollout token ``y_t`` the shift under a constructed teacher is
``log pi_T(y_t | x, y<t) - log pi_ref(y_t | x, y<t)``. Two constructions are
compared on the same tokens: *direct* (the reference conditioned on a correct
trace) and *contrastive* (the reference log-probs moved by
``lam * (log pi_ref(.|g+) - log pi_ref(.|g-))`` and renormalized).
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import torch

from .errors import DataError
from .guidance import poll_teacher
from .rollout import sample_group
from .seqmodel import TinyGPT, Vocab
from .tasks import Problem, render_prompt

PAPER_MARKERS = (
    "wait",
    "hold on",
    "oops",
    "not quite",
    "hmm",
    "let me rethink",
    "let me reconsider",
    "let me check",
)
TOY_MARKERS = ("recheck",)
EVAL_MARKERS = PAPER_MARKERS + TOY_MARKERS
CONSTRUCTIONS = ("direct", "contrastive")


@dataclass(frozen=True)
class ShiftRecord:
    t: int
    token: int
    delta: float
    construction: str


@dataclass
class ShiftProfile:
    problem_id: str
    tokens: list[int]
    direct: list[float]
    contrastive: list[float]
    lam: float

    def records(self) -> list[tuple[ShiftRecord, ShiftRecord]]:
        return [
            (ShiftRecord(t, tok, d, "direct"), ShiftRecord(t, tok, c, "contrastive"))
            for t, (tok, d, c) in enumerate(zip(self.tokens, self.direct, self.contrastive))
        ]


@dataclass(frozen=True)
class SupportChangeRow:
    expression: str
    direct: float
    contrastive: float
    difference: float
    count: int


@dataclass
class SupportChangeTable:
    rows: list[SupportChangeRow] = field(default_factory=list)
    missing: dict[str, str] = field(default_factory=dict)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)


class PairwiseJudge(Protocol):
    """Pluggable pairwise preference judge; no model client ships with the package."""

    def compare(self, prompt: str, a: str, b: str) -> str: ...


# -- log-prob rows ------------------------------------------------------------

def _log_rows(ref: TinyGPT, vocab: Vocab, x, y, guides: Sequence[str]) -> tuple[torch.Tensor, list[torch.Tensor]]:
    poll = poll_teacher(ref, vocab, x, y, H=len(y), positive=list(guides))
    return torch.log_softmax(poll.anchor, -1), [torch.log_softmax(z, -1) for z in poll.positive]


def contrastive_logits(ref_logp: torch.Tensor, pos_logp: torch.Tensor, neg_logp: torch.Tensor, lam: float) -> torch.Tensor:
    """Unnormalized contrastive log-scores ``log pi_ref + lam (log pi+ - log pi-)``."""
    return ref_logp + lam * (pos_logp - neg_logp)


def contrastive_log_probs(ref_logp, pos_logp, neg_logp, lam: float) -> torch.Tensor:
    return torch.log_softmax(contrastive_logits(ref_logp, pos_logp, neg_logp, lam), -1)


def direct_teacher_logprob(ref: TinyGPT, vocab: Vocab, x, g_pos: str | None, y, t: int) -> float:
    """``log pi_ref(y_t | x, g+, y<t)``; with ``g_pos=None`` the guidance block is omitted."""
    if g_pos is None:
        logp, _ = _log_rows(ref, vocab, x, y[: t + 1], [])
    else:
        _, (logp,) = _log_rows(ref, vocab, x, y[: t + 1], [g_pos])
    return float(logp[t, y[t]])


def contrastive_teacher_logprob(ref: TinyGPT, vocab: Vocab, x, g_pos: str, g_neg: str, y, t: int, lam: float = 1.0) -> float:
    base, (lp, ln) = _log_rows(ref, vocab, x, y[: t + 1], [g_pos, g_neg])
    return float(contrastive_log_probs(base[t], lp[t], ln[t], lam)[y[t]])


def shift_profile(
    ref: TinyGPT,
    vocab: Vocab,
    problem: Problem,
    g_pos: str | None,
    g_neg: str | None,
    y: Sequence[int],
    lam: float = 1.0,
) -> ShiftProfile:
    """Per-token shifts of both constructions along the response ``y``.

    ``None`` guidance means the neutral (unguided) context, so every shift is
    exactly zero for that construction.
    """
    x = render_prompt(problem, vocab)
    y = list(y)
    guides = [g for g in (g_pos, g_neg) if g is not None]
    base, rows = _log_rows(ref, vocab, x, y, guides)
    it = iter(rows)
    lp = next(it) if g_pos is not None else base
    ln = next(it) if g_neg is not None else base
    idx = torch.as_tensor(y, dtype=torch.long).unsqueeze(1)
    ref_tok = base.gather(1, idx).squeeze(1)
    dir_tok = lp.gather(1, idx).squeeze(1)
    ctr_tok = contrastive_log_probs(base, lp, ln, lam).gather(1, idx).squeeze(1)
    return ShiftProfile(
        problem_id=problem.id,
        tokens=y,
        direct=(dir_tok - ref_tok).tolist(),
        contrastive=(ctr_tok - ref_tok).tolist(),
        lam=lam,
    )


def select_guidance(ref: TinyGPT, vocab: Vocab, problem: Problem, n: int = 8, max_len: int = 256, seed=0):
    """Sample ``n`` reference rollouts and pick one correct and one incorrect trace.

    The analyzed response is a rollout that contains a toy marker when one
    exists, otherwise a rollout not used as guidance, otherwise the incorrect
    one. Returns ``None`` when either outcome is missing.
    """
    group = sample_group(ref, problem, vocab, n, 1.0, max_len, seed)
    pos = [j for j, y in enumerate(group.rollouts) if y.r == 1]
    neg = [j for j, y in enumerate(group.rollouts) if y.r == 0 and y.length]
    if not pos or not neg:
        return None
    jp, jn = pos[0], neg[0]
    rest = [j for j in range(group.G) if j not in (jp, jn) and group.rollouts[j].length]
    marked = [j for j in rest if any(m in group.rollouts[j].text.lower() for m in TOY_MARKERS)]
    jy = (marked or rest or [jn])[0]
    ys = group.rollouts
    return ys[jp].text, ys[jn].text, list(ys[jy].tokens)


def diagnose(ref: TinyGPT, vocab: Vocab, problems: Sequence[Problem], lam: float = 1.0, n: int = 8, seed: int = 0, max_len: int = 256):
    """Profiles for every problem with both outcomes among ``n`` reference samples."""
    profiles, skipped = [], []
    for i, p in enumerate(problems):
        chosen = select_guidance(ref, vocab, p, n, max_len, (seed, i))
        if chosen is None:
            skipped.append(p.id)
            continue
        g_pos, g_neg, y = chosen
        profiles.append(shift_profile(ref, vocab, p, g_pos, g_neg, y, lam))
    return profiles, skipped


# -- tables and counts --------------------------------------------------------

def _find_spans(tokens: Sequence[int], pattern: Sequence[int]) -> list[int]:
    n, m = len(tokens), len(pattern)
    return [i for i in range(n - m + 1) if list(tokens[i : i + m]) == list(pattern)] if m else []


def support_change_table(profiles: Sequence[ShiftProfile], expressions: Sequence[str], vocab: Vocab) -> SupportChangeTable:
    """Mean shift over all token positions inside matched expression spans."""
    table = SupportChangeTable()
    for expr in expressions:
        try:
            pattern = vocab.encode(expr)
        except DataError:
            table.missing[expr] = "not representable in the vocabulary"
            continue
        d_vals, c_vals, count = [], [], 0
        for prof in profiles:
            for s in _find_spans(prof.tokens, pattern):
                count += 1
                d_vals += prof.direct[s : s + len(pattern)]
                c_vals += prof.contrastive[s : s + len(pattern)]
        if not count:
            table.missing[expr] = "count 0"
            continue
        d = sum(d_vals) / len(d_vals)
        c = sum(c_vals) / len(c_vals)
        table.rows.append(SupportChangeRow(expr, d, c, c - d, count))
    return table


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def marker_frequency(texts: Sequence[str], keywords: Sequence[str] = EVAL_MARKERS, n_tokens: int | None = None) -> dict:
    """Case-insensitive substring counts and the total rate per 1000 generated tokens.

    ``n_tokens`` defaults to the whitespace word count of the corpus.
    """
    counts = {k: 0 for k in keywords}
    words = 0
    for text in texts:
        norm = _normalize(text)
        words += len(norm.split())
        for k in keywords:
            counts[k] += len(re.findall(re.escape(_normalize(k)), norm))
    n = words if n_tokens is None else n_tokens
    total = sum(counts.values())
    return {"counts": counts, "total": total, "n_tokens": n, "rate_per_1k": 1000.0 * total / n if n else 0.0}


# -- export -------------------------------------------------------------------

def write_profiles(path: str | Path, profiles: Sequence[ShiftProfile], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in profiles:
            fh.write(json.dumps({**(meta or {}), **asdict(p)}) + "\n")


def read_profiles(path: str | Path) -> list[ShiftProfile]:
    out = []
    keys = set(ShiftProfile.__dataclass_fields__)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        try:
            rec = json.loads(line)
            out.append(ShiftProfile(**{k: rec[k] for k in keys}))
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}:{lineno}: bad profile record ({exc})") from exc
    return out


def render_table(table: SupportChangeTable) -> str:
    lines = ["| expression | direct | contrastive | difference | count |", "|---|---|---|---|---|"]
    for r in table.rows:
        lines.append(f"| {r.expression} | {r.direct:.4f} | {r.contrastive:.4f} | {r.difference:.4f} | {r.count} |")
    for expr, why in table.missing.items():
        lines.append(f"\nomitted: {expr!r} ({why})")
    return "\n".join(lines) + "\n"


def write_table_csv(path: str | Path, table: SupportChangeTable) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["expression", "direct", "contrastive", "difference", "count"])
        for r in table.rows:
            w.writerow([r.expression, repr(r.direct), repr(r.contrastive), repr(r.difference), r.count])
