import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oglssd.errors import ArtifactIOError, DataError
from oglssd.tasks import (
    Problem,
    arith_trace,
    evaluate_expression,
    gen_arith_chain,
    gen_reversal,
    generate_problems,
    load_dataset,
    make_splits,
    parse_expression,
    reduction_steps,
    render_prompt,
    save_dataset,
    verify,
)

from oracles import mod_eval


def _problem(expr, m, split="train"):
    return Problem("p", f"Compute {expr} mod {m}.", "", str(mod_eval(expr, m)), 2, m, split)


def test_frozen_example():
    p = _problem("((2+3)*4)", 5)
    assert p.canonical_answer == "0"
    assert arith_trace(p).splitlines()[-1] == "Answer: 0"


def test_trace_lines_name_the_reduced_operation():
    p = _problem("((2+3)*4)", 5)
    assert arith_trace(p) == "Step: 2+3=0 (0*4)\nStep: 0*4=0\nAnswer: 0"
    assert arith_trace(p, recheck=True).splitlines()[-2:] == ["recheck: 0", "Answer: 0"]


def test_single_op_trace_has_two_lines():
    p = gen_arith_chain(1, 7, random.Random(0))
    assert len(p.solution_trace.splitlines()) == 2


def test_generation_deterministic():
    assert gen_arith_chain(3, 11, random.Random(5)) == gen_arith_chain(3, 11, random.Random(5))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5), st.sampled_from([5, 7, 11, 13]), st.integers(0, 10**6))
def test_answer_matches_independent_evaluation(k, m, seed):
    p = gen_arith_chain(k, m, random.Random(seed))
    assert int(p.canonical_answer) == mod_eval(p.expression, m)
    assert evaluate_expression(p.expression, m) == mod_eval(p.expression, m)
    assert verify(p, p.solution_trace).r == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10**6))
def test_random_orders_all_valid(k, seed):
    p = gen_arith_chain(k, 11, random.Random(seed))
    rng = random.Random(seed + 1)
    steps = reduction_steps(parse_expression(p.expression), 11, rng)
    assert len(steps) == k
    assert all(mod_eval(s, 11) == int(p.canonical_answer) for s in steps)
    assert steps[-1] == p.canonical_answer


def test_verify_cases():
    p = _problem("((2+3)*4)", 5)
    v = verify(p, "Step: (0*4)\nAnswer: 0")
    assert (v.r, v.format_ok) == (1, True)
    v = verify(p, "Step: (0*4)\n0")
    assert (v.r, v.format_ok) == (0, False)
    v = verify(p, "Answer: 3")
    assert (v.r, v.format_ok) == (0, True)
    assert verify(p, "Answer: 3\nanswer: 0").r == 1
    assert verify(p, "Answer: 0\nAnswer: 3").r == 0
    assert verify(p, "Answer: 10").r == 1


def test_reversal_family():
    p = gen_reversal(4, random.Random(1))
    assert p.family == "reverse"
    assert verify(p, p.solution_trace).r == 1
    assert verify(p, "Answer: " + p.expression).r == int(p.expression == p.expression[::-1])


def test_round_trip_tokenization(vocab):
    for p in generate_problems(300, 1, "train"):
        assert vocab.decode(vocab.encode(p.prompt_text)) == p.prompt_text
        assert vocab.decode(vocab.encode(p.solution_trace)) == p.solution_trace


def test_empty_prompt_and_bad_glyph(vocab):
    with pytest.raises(DataError):
        render_prompt(Problem("e", "", "", "0", 1, 5, "train"), vocab)
    with pytest.raises(DataError, match="'%'"):
        render_prompt(Problem("e", "Compute 3%4", "", "0", 1, 5, "train"), vocab)


def test_split_hygiene_and_counts():
    sp = make_splits(2000, 200, 7, n_warmup=500)
    assert (len(sp["train"]), len(sp["eval"]), len(sp["warmup"])) == (2000, 200, 500)
    ev = {p.expression for p in sp["eval"]}
    assert not ev & {p.expression for p in sp["train"]}
    assert not ev & {p.expression for p in sp["warmup"]}
    for p in sp["train"]:
        assert 2 <= p.k <= 4 and p.m in (5, 7, 11)


def test_dataset_round_trip(tmp_path):
    ds = generate_problems(1000, 3, "train")
    path = tmp_path / "d.jsonl"
    save_dataset(path, ds)
    assert len(path.read_text().splitlines()) == 1000
    assert load_dataset(path).problems == ds.problems


def test_truncated_file_reports_line(tmp_path):
    ds = generate_problems(5, 3, "train")
    path = tmp_path / "d.jsonl"
    save_dataset(path, ds)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:3] + [lines[3][:20]]) + "\n")
    with pytest.raises(DataError, match=":4"):
        load_dataset(path)


def test_missing_dataset(tmp_path):
    with pytest.raises(ArtifactIOError):
        load_dataset(tmp_path / "none.jsonl")
