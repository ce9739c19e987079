"""Synthetic verifiable reasoning tasks.

Two families share one record layout:

* arithmetic: ``Compute ((2+3)*4) mod 5.`` solved by reducing one innermost
  operation per ``Step:`` line, every intermediate value taken mod m;
* reversal: ``Reverse abcd.`` solved by growing the reversed string one
  character per ``Step:`` line.

Both traces end with ``Answer: N``.
"""

from __future__ import annotations

import ast
import json
import random
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ArtifactIOError, DataError
from .seqmodel import Vocab

OPS = "+-*"
LETTERS = "abcdefgh"
RECORD_FIELDS = ("id", "prompt_text", "solution_trace", "canonical_answer", "k", "m", "split")
_ANSWER_RE = re.compile(r"answer\s*:\s*(\S+)", re.IGNORECASE)


@dataclass(frozen=True)
class Problem:
    id: str
    prompt_text: str
    solution_trace: str
    canonical_answer: str
    k: int
    m: int
    split: str = "train"

    @property
    def family(self) -> str:
        return "reverse" if self.prompt_text.startswith("Reverse") else "arith"

    @property
    def expression(self) -> str:
        if self.family == "reverse":
            return self.prompt_text[len("Reverse ") : -1]
        return self.prompt_text[len("Compute ") : self.prompt_text.rindex(" mod ")]


@dataclass
class Dataset:
    problems: list[Problem]
    split: str
    seed: int = 0

    def __len__(self) -> int:
        return len(self.problems)

    def __iter__(self):
        return iter(self.problems)

    def __getitem__(self, i):
        return self.problems[i]


@dataclass(frozen=True)
class VerdictRecord:
    r: int
    parsed_answer: str | None
    format_ok: bool


# -- expression trees -------------------------------------------------------

@dataclass
class Node:
    value: int | None = None
    op: str | None = None
    left: "Node | None" = None
    right: "Node | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def render(self) -> str:
        if self.is_leaf:
            return str(self.value)
        return f"({self.left.render()}{self.op}{self.right.render()})"


def _apply(op: str, a: int, b: int, m: int) -> int:
    if op == "+":
        return (a + b) % m
    if op == "-":
        return (a - b) % m
    return (a * b) % m


def random_tree(k: int, m: int, rng: random.Random) -> Node:
    root = Node(value=rng.randrange(m))
    leaves = [root]
    for _ in range(k):
        leaf = leaves.pop(rng.randrange(len(leaves)))
        leaf.op = rng.choice(OPS)
        leaf.left = Node(value=leaf.value)
        leaf.right = Node(value=rng.randrange(m))
        leaf.value = None
        leaves += [leaf.left, leaf.right]
    return root


def parse_expression(text: str) -> Node:
    """Parse a fully parenthesized expression such as ``((2+3)*4)``."""
    pos = 0

    def parse() -> Node:
        nonlocal pos
        if pos >= len(text):
            raise DataError(f"unexpected end of expression {text!r}")
        if text[pos] == "(":
            pos += 1
            left = parse()
            if pos >= len(text) or text[pos] not in OPS:
                raise DataError(f"expected operator at offset {pos} in {text!r}")
            op = text[pos]
            pos += 1
            right = parse()
            if pos >= len(text) or text[pos] != ")":
                raise DataError(f"expected ')' at offset {pos} in {text!r}")
            pos += 1
            return Node(op=op, left=left, right=right)
        start = pos
        while pos < len(text) and text[pos].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"expected a number at offset {pos} in {text!r}")
        return Node(value=int(text[start:pos]))

    node = parse()
    if pos != len(text):
        raise DataError(f"trailing characters in expression {text!r}")
    return node


def _reducible(node: Node, path=()) -> list[tuple]:
    if node.is_leaf:
        return []
    if node.left.is_leaf and node.right.is_leaf:
        return [path]
    return _reducible(node.left, path + ("left",)) + _reducible(node.right, path + ("right",))


def _copy(node: Node) -> Node:
    if node.is_leaf:
        return Node(value=node.value)
    return Node(op=node.op, left=_copy(node.left), right=_copy(node.right))


def reductions(tree: Node, m: int, rng: random.Random | None = None) -> list[tuple[str, str]]:
    """``(operation, rendered expression)`` after each single-operation reduction.

    The operation reads like ``4-0=4``. ``rng=None`` always reduces the leftmost
    innermost operation; otherwise the innermost operation is chosen uniformly,
    giving alternative valid orders.
    """
    tree = _copy(tree)
    out = []
    while not tree.is_leaf:
        paths = _reducible(tree)
        path = paths[0] if rng is None else rng.choice(paths)
        parent, node = None, tree
        for side in path:
            parent, node = node, getattr(node, side)
        value = _apply(node.op, node.left.value, node.right.value, m)
        reduced = Node(value=value)
        if parent is None:
            tree = reduced
        else:
            setattr(parent, path[-1], reduced)
        out.append((f"{node.left.value}{node.op}{node.right.value}={value}", tree.render()))
    return out


def reduction_steps(tree: Node, m: int, rng: random.Random | None = None) -> list[str]:
    """Rendered expression after each reduction (see :func:`reductions`)."""
    return [expr for _, expr in reductions(tree, m, rng)]


def evaluate_expression(expr: str, m: int) -> int:
    """Independent oracle: integer evaluation through Python's own parser, then mod m."""
    def ev(n):
        if isinstance(n, ast.Expression):
            return ev(n.body)
        if isinstance(n, ast.Constant) and isinstance(n.value, int):
            return n.value
        if isinstance(n, ast.BinOp):
            a, b = ev(n.left), ev(n.right)
            if isinstance(n.op, ast.Add):
                return a + b
            if isinstance(n.op, ast.Sub):
                return a - b
            if isinstance(n.op, ast.Mult):
                return a * b
        raise DataError(f"unsupported expression node {ast.dump(n)}")

    return ev(ast.parse(expr, mode="eval")) % m


# -- traces -----------------------------------------------------------------

def arith_trace(problem: Problem, rng: random.Random | None = None, recheck: bool = False) -> str:
    """A valid solution trace; with ``rng`` the reduction order is randomized.

    Each line names the reduced operation and then the rewritten expression,
    e.g. ``Step: 2+3=0 (0*4)``; the last line carries the value alone.
    """
    steps = reductions(parse_expression(problem.expression), problem.m, rng)
    lines = [f"Step: {op}" if i == len(steps) - 1 else f"Step: {op} {expr}" for i, (op, expr) in enumerate(steps)]
    final = steps[-1][1]
    if recheck:
        lines.append(f"recheck: {final}")
    lines.append(f"Answer: {final}")
    return "\n".join(lines)


def reverse_trace(problem: Problem, recheck: bool = False) -> str:
    s = problem.expression
    lines = [f"Step: {s[::-1][: i + 1]}" for i in range(len(s))]
    if recheck:
        lines.append(f"recheck: {s[::-1]}")
    lines.append(f"Answer: {s[::-1]}")
    return "\n".join(lines)


def sample_trace(problem: Problem, rng: random.Random | None = None, recheck: bool = False) -> str:
    if problem.family == "reverse":
        return reverse_trace(problem, recheck)
    return arith_trace(problem, rng, recheck)


def gen_arith_chain(k: int, m: int, rng: random.Random, id: str = "arith", split: str = "train") -> Problem:
    if k < 1 or m < 2:
        raise DataError(f"need k >= 1 and m >= 2, got k={k}, m={m}")
    expr = random_tree(k, m, rng).render()
    base = Problem(id, f"Compute {expr} mod {m}.", "", str(evaluate_expression(expr, m)), k, m, split)
    trace = arith_trace(base)
    return Problem(id, base.prompt_text, trace, base.canonical_answer, k, m, split)


def gen_reversal(k: int, rng: random.Random, id: str = "rev", split: str = "train", alphabet: str = LETTERS) -> Problem:
    if k < 1:
        raise DataError(f"need k >= 1, got {k}")
    s = "".join(rng.choice(alphabet) for _ in range(k))
    base = Problem(id, f"Reverse {s}.", "", s[::-1], k, len(alphabet), split)
    return Problem(id, base.prompt_text, reverse_trace(base), base.canonical_answer, k, base.m, split)


# -- verification -----------------------------------------------------------

def _normalize(problem: Problem, raw: str) -> str | None:
    raw = raw.strip()
    if problem.family == "reverse":
        return raw
    try:
        return str(int(raw) % problem.m)
    except ValueError:
        return None


def verify(problem: Problem, rollout_text: str) -> VerdictRecord:
    """Grade the last ``Answer: <run>`` occurrence (case-insensitive)."""
    matches = _ANSWER_RE.findall(rollout_text)
    if not matches:
        return VerdictRecord(r=0, parsed_answer=None, format_ok=False)
    parsed = _normalize(problem, matches[-1])
    r = int(parsed is not None and parsed == problem.canonical_answer)
    return VerdictRecord(r=r, parsed_answer=parsed if parsed is not None else matches[-1], format_ok=True)


def render_prompt(problem: Problem, vocab: Vocab) -> list[int]:
    if not problem.prompt_text:
        raise DataError(f"problem {problem.id} has an empty prompt")
    return [vocab.bos] + vocab.encode(problem.prompt_text)


# -- datasets ---------------------------------------------------------------

def generate_problems(
    n: int,
    seed: int,
    split: str,
    k_range: tuple[int, int] = (2, 4),
    moduli: Sequence[int] = (5, 7, 11),
    family: str = "arith",
    exclude: Iterable[str] = (),
) -> Dataset:
    """``n`` problems with distinct expressions, none of which is in ``exclude``.

    Uniqueness is on the expression alone, so one expression never appears
    under two moduli.
    """
    rng = random.Random(f"{family}:{split}:{seed}")
    banned = set(exclude)
    seen: set[str] = set()
    problems: list[Problem] = []
    attempts = 0
    while len(problems) < n:
        attempts += 1
        if attempts > 200 * max(n, 1):
            raise DataError(f"could not draw {n} distinct {family} problems for split {split!r}")
        k = rng.randint(*k_range)
        pid = f"{split}-{len(problems):05d}"
        if family == "reverse":
            p = gen_reversal(k, rng, id=pid, split=split)
        elif family == "arith":
            p = gen_arith_chain(k, rng.choice(list(moduli)), rng, id=pid, split=split)
        else:
            raise DataError(f"unknown task family {family!r}")
        key = p.expression
        if key in seen or key in banned:
            continue
        seen.add(key)
        problems.append(p)
    return Dataset(problems, split, seed)


def make_splits(
    n_train: int,
    n_eval: int,
    seed: int,
    k_range: tuple[int, int] = (2, 4),
    moduli: Sequence[int] = (5, 7, 11),
    family: str = "arith",
    n_warmup: int = 0,
) -> dict[str, Dataset]:
    """Eval first, then train and warmup splits disjoint from everything drawn before."""
    out = {"eval": generate_problems(n_eval, seed, "eval", k_range, moduli, family)}
    used = {p.expression for p in out["eval"]}
    out["train"] = generate_problems(n_train, seed, "train", k_range, moduli, family, exclude=used)
    used |= {p.expression for p in out["train"]}
    if n_warmup:
        out["warmup"] = generate_problems(n_warmup, seed, "warmup", k_range, moduli, family, exclude=used)
    return out


def save_dataset(path: str | Path, dataset: Dataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in dataset.problems:
            rec = asdict(p)
            fh.write(json.dumps({k: rec[k] for k in RECORD_FIELDS}, ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise ArtifactIOError(f"dataset file not found: {path}")
    problems = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
                if list(rec) != list(RECORD_FIELDS):
                    raise ValueError(f"fields {list(rec)} != {list(RECORD_FIELDS)}")
                problems.append(
                    Problem(
                        id=str(rec["id"]),
                        prompt_text=str(rec["prompt_text"]),
                        solution_trace=str(rec["solution_trace"]),
                        canonical_answer=str(rec["canonical_answer"]),
                        k=int(rec["k"]),
                        m=int(rec["m"]),
                        split=str(rec["split"]),
                    )
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate problem ids")
    split = problems[0].split if problems else "train"
    return Dataset(problems, split)
