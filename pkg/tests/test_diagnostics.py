import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oglssd import diagnostics as dg
from oglssd.seqmodel import forward_logits

from helpers import problem
from oracles import log_softmax

G_POS = "Step: (0*4)\nAnswer: 0"
G_NEG = "Step: (1*4)\nAnswer: 4"


def _y(vocab):
    return vocab.encode("Step: (0*4)\nrecheck: 0\nAnswer: 0") + [vocab.eos]


def test_neutral_guidance_gives_zero_shift(small, vocab):
    prof = dg.shift_profile(small, vocab, problem(), None, None, _y(vocab), lam=1.0)
    assert prof.direct == [0.0] * len(prof.tokens)
    assert max(abs(v) for v in prof.contrastive) <= 1e-12


def test_equal_guidance_cancels(small, vocab):
    prof = dg.shift_profile(small, vocab, problem(), G_POS, G_POS, _y(vocab), lam=1.0)
    assert max(abs(v) for v in prof.contrastive) <= 1e-12
    assert len(prof.tokens) == len(_y(vocab)) == len(prof.direct)


def test_direct_matches_independent_forward(small, vocab):
    p = problem()
    x = [vocab.bos] + vocab.encode(p.prompt_text)
    y = _y(vocab)
    ctx = x + [vocab.guide_open] + vocab.encode(G_POS) + [vocab.guide_close]
    t = 5
    full = forward_logits(small, ctx + y[:t + 1]).detach().numpy()
    want = log_softmax(full[len(ctx) + t - 1])[y[t]]
    got = dg.direct_teacher_logprob(small, vocab, x, G_POS, y, t)
    assert got == pytest.approx(want, abs=1e-12) and got <= 0
    assert dg.direct_teacher_logprob(small, vocab, x, None, y, t) == pytest.approx(
        log_softmax(forward_logits(small, x + y[:t + 1]).detach().numpy()[len(x) + t - 1])[y[t]], abs=1e-12)


def test_contrastive_lambda_zero_is_reference(small, vocab):
    p = problem()
    x = [vocab.bos] + vocab.encode(p.prompt_text)
    y = _y(vocab)
    ref = dg.direct_teacher_logprob(small, vocab, x, None, y, 4)
    assert dg.contrastive_teacher_logprob(small, vocab, x, G_POS, G_NEG, y, 4, lam=0.0) == pytest.approx(ref, abs=1e-12)


def test_hand_case_v2():
    ref = torch.log(torch.tensor([0.5, 0.5], dtype=torch.float64))
    pos = torch.log(torch.tensor([0.8, 0.2], dtype=torch.float64))
    neg = torch.log(torch.tensor([0.2, 0.8], dtype=torch.float64))
    # scores: log .5 + log 4, log .5 - log 4  ->  probs 16/17, 1/17
    got = dg.contrastive_log_probs(ref, pos, neg, 1.0).exp().tolist()
    assert got == pytest.approx([16 / 17, 1 / 17], abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.floats(-4, 4), st.integers(0, 2**31))
def test_swap_antisymmetry_and_normalization(V, lam, seed):
    g = torch.Generator().manual_seed(seed)
    base, lp, ln = (torch.log_softmax(torch.randn(4, V, generator=g, dtype=torch.float64) * 2, -1) for _ in range(3))
    swapped = dg.contrastive_logits(base, ln, lp, lam)
    negated = dg.contrastive_logits(base, lp, ln, -lam)
    assert float((swapped - negated).abs().max()) <= 1e-12
    rows = dg.contrastive_log_probs(base, lp, ln, lam).exp().sum(-1)
    assert float((rows - 1).abs().max()) <= 1e-6


def test_marker_frequency_cases():
    got = dg.marker_frequency(["wait, hold on"], dg.PAPER_MARKERS)
    assert got["counts"]["wait"] == 1 and got["counts"]["hold on"] == 1 and got["total"] == 2
    empty = dg.marker_frequency([], dg.EVAL_MARKERS)
    assert empty["total"] == 0 and empty["rate_per_1k"] == 0.0
    assert len(dg.PAPER_MARKERS) == 8


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(dg.PAPER_MARKERS), st.integers(0, 4)), max_size=6), st.integers(0, 2**31))
def test_marker_planted_counts(plants, seed):
    rng = np.random.default_rng(seed)
    filler = ["alpha", "beta", "gamma", "delta"]
    words, expected = [], {k: 0 for k in dg.PAPER_MARKERS}
    for kw, n in plants:
        for _ in range(n):
            words += list(rng.choice(filler, 2)) + [kw.upper() if rng.random() < 0.5 else kw]
            expected[kw] += 1
    text = "  ".join(words)
    got = dg.marker_frequency([text], dg.PAPER_MARKERS)
    # "let me rethink"/"reconsider"/"check" never contain one another, so counts are exact
    assert got["counts"] == expected
    n = len(text.split())
    assert got["rate_per_1k"] == pytest.approx(1000 * sum(expected.values()) / n if n else 0.0)


def test_support_change_arithmetic(vocab):
    toks = vocab.encode("recheck: 1\nrecheck")
    span = vocab.encode("recheck")
    assert len(span) == 1
    prof = dg.ShiftProfile("p", toks, [-1.0] + [0.0] * (len(toks) - 2) + [-2.0], [0.5] * len(toks), 1.0)
    table = dg.support_change_table([prof], ["recheck", "Answer", "hmm"], vocab)
    (row,) = table.rows
    assert row.direct == pytest.approx(-1.5) and row.contrastive == pytest.approx(0.5)
    assert row.difference == pytest.approx(2.0) and row.count == 2
    assert "Answer" in table.missing and "hmm" in table.missing


def test_two_token_span_mean(vocab):
    toks = vocab.encode("1:")
    prof = dg.ShiftProfile("p", toks, [-1.0, -2.0], [0.0, 0.0], 1.0)
    (row,) = dg.support_change_table([prof], ["1:"], vocab).rows
    assert row.direct == pytest.approx(-1.5)


def test_profiles_round_trip(tmp_path, small, vocab):
    prof = dg.shift_profile(small, vocab, problem(), G_POS, G_NEG, _y(vocab))
    path = tmp_path / "p.jsonl"
    dg.write_profiles(path, [prof], meta={"run_id": "r"})
    assert dg.read_profiles(path) == [prof]
    pairs = prof.records()
    assert len(pairs) == len(prof.tokens) and pairs[0][0].construction == "direct"


def test_render_table_columns(vocab):
    prof = dg.ShiftProfile("p", vocab.encode("recheck"), [-1.0], [1.0], 1.0)
    text = dg.render_table(dg.support_change_table([prof], ["recheck", "hmm"], vocab))
    assert text.splitlines()[0] == "| expression | direct | contrastive | difference | count |"
    assert "omitted: 'hmm'" in text


def test_diagnose_skips_problems_without_both_outcomes(small, vocab):
    profiles, skipped = dg.diagnose(small, vocab, [problem()], n=4, max_len=20)
    assert len(profiles) + len(skipped) == 1
