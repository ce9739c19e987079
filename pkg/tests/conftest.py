import pytest
import torch

import oglssd.trainer as tr
from oglssd.rollout import RolloutGroup
from oglssd.seqmodel import ModelDims, Vocab, init_model
from oglssd.tasks import render_prompt

from helpers import rollout

torch.set_num_threads(1)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="run the long training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiment (enable with --run-slow)")
    config.addinivalue_line("markers", "criterion(n, title, budget_s): numbered acceptance criterion")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture
def tiny(vocab):
    """A model small enough for finite differences (about 2k parameters)."""
    return init_model(ModelDims(V=vocab.size, d=8, L=1, W=96, n_heads=1), seed=3)


@pytest.fixture
def small(vocab):
    return init_model(ModelDims(V=vocab.size, d=16, L=2, W=256, n_heads=2), seed=5)


@pytest.fixture
def fake_sampler(monkeypatch, vocab):
    """Replace on-policy sampling with scripted rollout texts keyed by problem id."""
    script = {}

    def sampler(policy, problems, vocab_, G, temperature, max_len, seeds):
        groups = []
        for p in problems:
            texts = script[p.id][:G]
            groups.append(RolloutGroup(p, render_prompt(p, vocab), [rollout(vocab, p, t) for t in texts]))
        return groups

    monkeypatch.setattr(tr, "sample_groups", sampler)
    return script


# -- acceptance report --------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title, budget = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "budget": budget, "status": None, "duration": 0.0})
    if rep.when == "call":
        entry["duration"] = rep.duration
    if rep.skipped:
        entry["status"] = "SKIP"
    elif rep.failed:
        entry["status"] = "FAIL"
    elif rep.when == "call" and entry["status"] is None:
        entry["status"] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        tr.write_line(
            f"criterion {n:>2}: {e['status'] or 'ERROR':<4}  {e['title']}  "
            f"({e['duration']:.1f} s of {e['budget']:g} s budget)"
        )
