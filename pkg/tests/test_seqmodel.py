import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oglssd.errors import ArtifactIOError, ConfigError, ContextWindowError, DataError
from oglssd.seqmodel import (
    ModelDims,
    Vocab,
    backward,
    batch_forward,
    forward_logits,
    init_model,
    init_opt_state,
    load_checkpoint,
    next_dist,
    optimizer_step,
    param_digest,
    sample_batch,
    sample_sequence,
    save_checkpoint,
    softmax_temperature,
)

from oracles import central_difference, softmax


def test_same_seed_same_params():
    dims = ModelDims(V=32, d=16, L=2, W=128)
    assert param_digest(init_model(dims, 1)) == param_digest(init_model(dims, 1))


def test_different_seeds_differ():
    dims = ModelDims(V=32, d=16, L=2, W=128)
    a, b = init_model(dims, 1), init_model(dims, 2)
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    init_model(ModelDims(V=32, d=16, L=2, W=128), 9)
    assert torch.equal(torch.rand(3), expected)


def test_forward_shape():
    m = init_model(ModelDims(V=32, d=16, L=2, W=128), 1)
    assert forward_logits(m, [1, 2, 3]).shape == (3, 32)


@pytest.mark.parametrize("bad", [dict(V=0), dict(d=0), dict(L=0), dict(W=0)])
def test_zero_dimension_is_config_error(bad):
    kw = dict(V=32, d=16, L=2, W=128) | bad
    with pytest.raises(ConfigError):
        ModelDims(**kw)


def test_context_window_boundary(vocab):
    m = init_model(ModelDims(V=vocab.size, d=8, L=1, W=16, n_heads=1), 0)
    assert forward_logits(m, [1] * 16).shape[0] == 16
    with pytest.raises(ContextWindowError):
        forward_logits(m, [1] * 17)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 39), min_size=2, max_size=30), st.data())
def test_causality(tokens, data):
    m = init_model(ModelDims(V=40, d=8, L=2, W=64, n_heads=2), 4)
    t = data.draw(st.integers(1, len(tokens) - 1))
    other = list(tokens)
    other[t] = (other[t] + 1) % 40
    a, b = forward_logits(m, tokens), forward_logits(m, other)
    assert torch.equal(a[:t], b[:t])


def test_batched_rows_match_single_forward(small):
    seqs = [[1, 5, 6, 7], [1, 9], [1, 2, 3, 4, 5, 6]]
    out = batch_forward(small, seqs)
    for i, s in enumerate(seqs):
        torch.testing.assert_close(out[i, : len(s)], forward_logits(small, s), rtol=0, atol=1e-12)


def test_softmax_frozen_value():
    p = softmax_temperature(torch.tensor([2.0, 0.0], dtype=torch.float64), 1.0)
    assert p.tolist() == pytest.approx([0.8808, 0.1192], abs=1e-4)
    assert p.tolist() == pytest.approx(softmax([2.0, 0.0]).tolist(), abs=1e-15)


def test_uniform_and_high_temperature():
    assert softmax_temperature(torch.zeros(7, dtype=torch.float64), 1.0).tolist() == pytest.approx([1 / 7] * 7)
    z = torch.tensor([5.0, -3.0, 1.0, 0.0], dtype=torch.float64)
    assert softmax_temperature(z, 1e6).tolist() == pytest.approx([0.25] * 4, abs=1e-3)


@pytest.mark.parametrize("temp", [0.0, -1.0])
def test_nonpositive_temperature(small, temp):
    with pytest.raises(ConfigError):
        next_dist(small, [1, 2], temp)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 39), min_size=1, max_size=20), st.floats(0.1, 5.0))
def test_next_dist_normalized(tokens, temp):
    m = init_model(ModelDims(V=40, d=8, L=1, W=64, n_heads=1), 2)
    p = next_dist(m, tokens, temp)
    assert bool((p >= 0).all())
    assert abs(float(p.sum()) - 1) < 1e-6


def test_sampling_deterministic_and_boundaries(small, vocab):
    a = sample_sequence(small, [1, 7, 8], 20, 1.0, 11, vocab.eos)
    b = sample_sequence(small, [1, 7, 8], 20, 1.0, 11, vocab.eos)
    assert a == b
    assert sample_sequence(small, [1, 7, 8], 0, 1.0, 11, vocab.eos) == []


def test_rigged_eos_model_stops_immediately(vocab):
    m = init_model(ModelDims(V=vocab.size, d=8, L=1, W=32, n_heads=1), 0)
    with torch.no_grad():
        m.head.weight.zero_()
        m.ln_f.weight.zero_()
        m.ln_f.bias.zero_()
        m.ln_f.bias[0] = 1.0
        m.head.weight[vocab.eos, 0] = 1e4
    assert sample_sequence(m, [vocab.bos, 7], 10, 1.0, 0, vocab.eos) == [vocab.eos]


def test_sampling_row_independent_of_batch(small, vocab):
    prompts = [[1, 7, 8], [1, 9, 10, 11, 12]]
    both = sample_batch(small, prompts, 15, 1.0, [(0, 1), (0, 2)], vocab.eos)
    alone = sample_batch(small, prompts[1:], 15, 1.0, [(0, 2)], vocab.eos)
    assert both[1] == alone[0]


def test_cached_sampling_matches_full_forward(small, vocab):
    """Greedy-equivalent check: the cached decode computes the same distributions."""
    prompt = [1, 7, 8, 9]
    out = sample_batch(small, [prompt, [1, 5]], 12, 1.0, [3, 4], vocab.eos)[0]
    rng = np.random.default_rng((3,))
    seq = list(prompt)
    for tok in out:
        p = next_dist(small, seq).numpy()
        u = rng.random()
        assert int(np.searchsorted(np.cumsum(p), u * np.cumsum(p)[-1], side="right").clip(0, len(p) - 1)) == tok
        seq.append(tok)


def test_backward_detached_is_zero(tiny):
    loss = torch.tensor(3.0, dtype=torch.float64)
    grads = backward(loss, tiny)
    assert all(float(g.abs().sum()) == 0 for g in grads.values())


def test_backward_detach_kills_term(tiny):
    z = forward_logits(tiny, [1, 2, 3])
    g_a = backward(z.sum() + z.detach().pow(2).sum(), tiny)
    z = forward_logits(tiny, [1, 2, 3])
    g_b = backward(z.sum(), tiny)
    assert all(torch.equal(g_a[k], g_b[k]) for k in g_a)


def test_backward_squared_embeddings(tiny):
    grads = backward(tiny.tok_emb.weight.pow(2).sum(), tiny)
    torch.testing.assert_close(grads["tok_emb.weight"], 2 * tiny.tok_emb.weight.detach(), rtol=0, atol=0)


@pytest.mark.parametrize("seed", range(4))
def test_cross_entropy_finite_difference(vocab, seed):
    m = init_model(ModelDims(V=vocab.size, d=8, L=1, W=32, n_heads=1), seed)
    toks = [1, 5, 9, 12, 3, 7]

    def f():
        logp = torch.log_softmax(forward_logits(m, toks[:-1]), -1)
        return -logp[torch.arange(5), torch.tensor(toks[1:])].sum()

    grads = backward(f(), m)
    gen = torch.Generator().manual_seed(seed)
    params = dict(m.named_parameters())
    for name in ("head.weight", "blocks.0.qkv.weight", "tok_emb.weight"):
        p = params[name]
        for _ in range(3):
            idx = tuple(int(torch.randint(0, s, (1,), generator=gen)) for s in p.shape)
            with torch.no_grad():
                fd = central_difference(lambda: float(f()), p.data, idx)
            g = float(grads[name][idx])
            if abs(g) > 1e-8:
                assert abs(fd - g) / abs(g) <= 1e-3


def test_optimizer_zero_grad_leaves_params(tiny):
    st_ = init_opt_state(tiny)
    before = param_digest(tiny)
    rep = optimizer_step(tiny, {k: torch.zeros_like(v) for k, v in tiny.named_parameters()}, st_, 1e-2)
    assert param_digest(tiny) == before and st_.t == 1 and not rep.rejected


def test_optimizer_rejects_nan(tiny):
    st_ = init_opt_state(tiny)
    before = param_digest(tiny)
    grads = {k: torch.zeros_like(v) for k, v in tiny.named_parameters()}
    grads["head.weight"][0, 0] = float("nan")
    rep = optimizer_step(tiny, grads, st_, 1e-2)
    assert rep.rejected and st_.n_rejected == 1 and param_digest(tiny) == before


def test_optimizer_convex_probe(tiny):
    st_ = init_opt_state(tiny)
    target = torch.ones_like(tiny.head.weight)

    def loss():
        return (tiny.head.weight - target).pow(2).sum()

    start = loss().item()
    for _ in range(100):
        optimizer_step(tiny, backward(loss(), tiny), st_, 1e-2, max_grad_norm=0.0)
    assert loss().item() < start


def test_checkpoint_round_trip(tmp_path, tiny, vocab):
    st_ = init_opt_state(tiny)
    optimizer_step(tiny, backward(forward_logits(tiny, [1, 2]).sum(), tiny), st_, 1e-3)
    path = tmp_path / "c.pt"
    save_checkpoint(path, tiny, vocab, st_, 7, extra={"note": "x"})
    ck = load_checkpoint(path)
    assert param_digest(ck.model) == param_digest(tiny)
    assert ck.step == 7 and ck.vocab == vocab and ck.extra["note"] == "x"
    assert ck.opt_state.t == st_.t
    assert all(torch.equal(ck.opt_state.m[k], st_.m[k]) for k in st_.m)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_checkpoint(tmp_path / "nope.pt")


def test_checkpoint_garbage(tmp_path):
    p = tmp_path / "bad.pt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ArtifactIOError):
        load_checkpoint(p)


def test_vocab_unknown_character(vocab):
    with pytest.raises(DataError, match="'Z'"):
        vocab.encode("Compute Z")


def test_vocab_round_trip(vocab):
    text = "Compute ((2+3)*4) mod 5.\nStep: (0*4)\nAnswer: 0"
    assert vocab.decode(vocab.encode(text)) == text
    assert vocab.encode("Answer")[0] == vocab.answer and len(vocab.encode("Answer")) == 1
