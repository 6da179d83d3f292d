from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lateserve import build_sparse_index, build_store, open_store  # noqa: E402
from lateserve.server import Searcher  # noqa: E402


def random_corpus(rng: np.random.Generator, n_docs: int, dim: int, max_tokens: int = 8,
                  vocab: int = 40, max_terms: int = 6):
    dense = [(i, rng.standard_normal((int(rng.integers(1, max_tokens + 1)), dim))) for i in range(n_docs)]
    sparse = []
    for _ in range(n_docs):
        n_terms = int(rng.integers(1, max_terms + 1))
        terms = rng.choice(vocab, size=min(n_terms, vocab), replace=False)
        sparse.append({int(t): float(rng.uniform(0.0, 3.0)) for t in terms})
    return dense, sparse


def random_sparse_query(rng: np.random.Generator, vocab: int = 40, n_terms: int = 4) -> dict[int, float]:
    terms = rng.choice(vocab, size=min(n_terms, vocab), replace=False)
    return {int(t): float(rng.uniform(0.1, 2.0)) for t in terms}


def filler(prefix, n):
    return [f"{prefix}{i}" for i in range(n)]


def five_query_fixture():
    """Relevant docs placed at hand-chosen ranks.

    q1: rank 1. q2: two relevant, ranks 4 and 7. q3: rank 11. q4: rank 6.
    q5: judged but absent from the run.
    """
    qrels = {"q1": {"a"}, "q2": {"d", "e"}, "q3": {"f"}, "q4": {"g"}, "q5": {"h"}}
    run = {
        "q1": ["a", "b", "c"],
        "q2": filler("x", 3) + ["d"] + filler("y", 2) + ["e"] + filler("z", 50),
        "q3": filler("x", 10) + ["f"],
        "q4": filler("x", 5) + ["g"],
    }
    return run, qrels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_searcher(tmp_path):
    """Build a corpus on disk and return a factory of Searchers over it."""
    opened = []

    def factory(dense, sparse, mode="mapped", name="corpus", fusion=None):
        path = tmp_path / f"{name}.store"
        if not path.exists():
            build_store(dense, dense[0][1].shape[1], path)
        store = open_store(path, mode)
        opened.append(store)
        return Searcher(store, build_sparse_index(enumerate(sparse)), fusion)

    yield factory
    for s in opened:
        s.close()


# -- acceptance reporting ----------------------------------------------------

_criteria: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, text): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    crit = getattr(report, "_criterion", None)
    if crit:
        _criteria[crit[0]] = (crit[1], "PASS" if report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker:
        report._criterion = (str(marker.args[0]), marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: int(c)):
        text, status = _criteria[cid]
        terminalreporter.write_line(f"[{status}] AC-{cid}: {text}")
