from fractions import Fraction

import pytest
from conftest import filler, five_query_fixture
from hypothesis import given, settings
from hypothesis import strategies as st

from lateserve.metrics import (
    evaluate,
    mrr_at_k,
    parse_metric,
    read_qrels,
    read_run,
    recall_at_k,
    success_at_k,
    write_run,
)


def test_five_query_fixture_hand_values():
    run, qrels = five_query_fixture()
    # reciprocal ranks 1, 1/4, 0 (rank 11 > 10), 1/6, 0
    assert mrr_at_k(run, qrels, 10) == float(Fraction(1 + Fraction(1, 4) + Fraction(1, 6), 5))
    # per query 1, 1/2, 0, 0, 0
    assert recall_at_k(run, qrels, 5) == 0.3
    # per query 1, 1, 1, 1, 0
    assert recall_at_k(run, qrels, 50) == 0.8
    # q1 and q2 only
    assert success_at_k(run, qrels, 5) == 0.4


def test_single_query_examples():
    q = {"q": {"r"}}
    assert mrr_at_k({"q": ["r"]}, q, 10) == 1.0
    assert mrr_at_k({"q": ["a", "b", "c", "r"]}, q, 10) == 0.25
    assert mrr_at_k({"q": filler("a", 10) + ["r"]}, q, 10) == 0.0
    assert success_at_k({"q": filler("a", 4) + ["r"]}, q, 5) == 1.0
    assert success_at_k({"q": filler("a", 5) + ["r"]}, q, 5) == 0.0
    assert recall_at_k({"q": ["r", "s"]}, {"q": {"r", "t"}}, 5) == 0.5


def test_two_of_four_successful():
    qrels = {f"q{i}": {"r"} for i in range(4)}
    run = {"q0": ["r"], "q1": ["x", "r"], "q2": ["x"], "q3": []}
    assert success_at_k(run, qrels, 5) == 0.5


def test_errors():
    with pytest.raises(ValueError):
        mrr_at_k({}, {}, 10)
    with pytest.raises(ValueError):
        recall_at_k({"q": ["a"]}, {"q": {"a"}}, 0)
    with pytest.raises(ValueError):
        parse_metric("ndcg@10")
    assert parse_metric("Recall@50") == ("recall", 50)


docs = st.sampled_from([f"d{i}" for i in range(15)])
queries = st.dictionaries(
    st.sampled_from([f"q{i}" for i in range(6)]),
    st.tuples(st.lists(docs, unique=True, max_size=15), st.sets(docs, min_size=1, max_size=4)),
    min_size=1,
)


@settings(max_examples=200, deadline=None)
@given(queries, st.integers(1, 15), st.integers(0, 10))
def test_monotone_bounded_and_success_dominates_mrr(data, k, extra):
    run = {q: ranked for q, (ranked, _) in data.items()}
    qrels = {q: rel for q, (_, rel) in data.items()}
    for fn in (mrr_at_k, recall_at_k, success_at_k):
        lo, hi = fn(run, qrels, k), fn(run, qrels, k + extra)
        assert 0.0 <= lo <= hi <= 1.0
    assert success_at_k(run, qrels, k) >= mrr_at_k(run, qrels, k)


@settings(max_examples=100, deadline=None)
@given(queries, st.randoms())
def test_query_order_does_not_matter(data, rnd):
    run = {q: ranked for q, (ranked, _) in data.items()}
    qrels = {q: rel for q, (_, rel) in data.items()}
    keys = list(qrels)
    rnd.shuffle(keys)
    shuffled = {q: qrels[q] for q in keys}
    for metric in ("mrr@10", "recall@5", "success@5"):
        a = evaluate(run, qrels, [metric])[metric]
        b = evaluate(dict(reversed(list(run.items()))), shuffled, [metric])[metric]
        assert a == pytest.approx(b, rel=1e-12)


def test_file_roundtrip(tmp_path):
    run, qrels = five_query_fixture()
    write_run({q: [(d, 1.0 / (i + 1)) for i, d in enumerate(ds)] for q, ds in run.items()}, tmp_path / "run.tsv")
    (tmp_path / "qrels.tsv").write_text("".join(f"{q}\t{d}\n" for q, ds in qrels.items() for d in sorted(ds)))
    assert read_run(tmp_path / "run.tsv") == run
    assert read_qrels(tmp_path / "qrels.tsv") == qrels
    (tmp_path / "dup.tsv").write_text("q\ta\t1\t1.0\nq\ta\t2\t0.5\n")
    with pytest.raises(ValueError, match="duplicate"):
        read_run(tmp_path / "dup.tsv")
