import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_sparse_topk

from lateserve.sparse import (
    SparseRetriever,
    SparseVector,
    build_sparse_index,
    load_sparse_index,
    max_score_bound,
    read_sparse_vectors,
    save_sparse_index,
    top_k_sparse,
)


def test_single_doc_gets_top_code():
    idx = build_sparse_index([(0, {3: 1.0})])
    plist = idx.postings[3]
    assert plist.doc_ids.tolist() == [0] and plist.codes.tolist() == [255]
    assert idx.global_scale == 1.0
    (doc, score), = top_k_sparse(idx, {3: 2.0}, 5)
    assert doc == 0 and score == pytest.approx(2.0, abs=2.0 / 255)


def test_shared_term_postings_sorted():
    idx = build_sparse_index([(0, {7: 0.5}), (1, {2: 1.0, 7: 0.25})])
    assert idx.postings[7].doc_ids.tolist() == [0, 1]


def test_build_rejects_bad_vectors():
    with pytest.raises(ValueError, match="non-negative"):
        build_sparse_index([(0, {1: -0.5})])
    with pytest.raises(ValueError, match="duplicate term 4"):
        build_sparse_index([(0, [(4, 1.0), (4, 2.0)])])
    with pytest.raises(ValueError, match="no terms"):
        build_sparse_index([(0, {})])


def test_random_corpus_roundtrip_within_tolerance(rng):
    docs = [{int(t): float(rng.uniform(0, 5)) for t in rng.choice(30, 5, replace=False)} for _ in range(50)]
    idx = build_sparse_index(enumerate(docs))
    assert idx.global_scale == max(w for d in docs for w in d.values())
    n = 0
    for t, plist in idx.postings.items():
        for d, impact in zip(plist.doc_ids.tolist(), idx.impact(plist.codes).tolist()):
            assert abs(impact - docs[d][t]) <= idx.global_scale / 255
            n += 1
    assert n == sum(len(d) for d in docs)


def test_k_capped_by_matches():
    idx = build_sparse_index([(0, {1: 1.0}), (1, {1: 2.0}), (2, {1: 0.5, 2: 1.0})])
    assert len(top_k_sparse(idx, {1: 1.0}, 10)) == 3


def test_query_matching_nothing_is_empty():
    idx = build_sparse_index([(0, {1: 1.0})])
    assert top_k_sparse(idx, {99: 1.0}, 10) == []
    assert top_k_sparse(idx, {}, 10) == []


def test_random_corpus_matches_brute_force(rng):
    docs = [{int(t): float(rng.uniform(0, 5)) for t in rng.choice(30, int(rng.integers(1, 8)), replace=False)}
            for _ in range(50)]
    idx = build_sparse_index(enumerate(docs))
    for _ in range(20):
        q = {int(t): float(rng.uniform(0.1, 2)) for t in rng.choice(30, 4, replace=False)}
        assert top_k_sparse(idx, q, 10) == brute_sparse_topk(docs, q, 10)


def test_ties_broken_by_ascending_doc_id():
    docs = [{1: 1.0}, {2: 1.0}, {1: 1.0}, {1: 1.0, 2: 0.0}]
    idx = build_sparse_index(enumerate(docs))
    assert [d for d, _ in top_k_sparse(idx, {1: 1.0}, 2)] == [0, 2]
    assert [d for d, _ in top_k_sparse(idx, {1: 1.0}, 10)] == [0, 2, 3]


def test_max_score_bound():
    idx = build_sparse_index([(0, {1: 10 / 255}), (1, {1: 1.0}), (2, {2: 0.0, 3: 1.0})])
    assert max_score_bound(idx, 1) == pytest.approx(idx.global_scale)
    assert max_score_bound(idx, 2) == 0.0
    with pytest.raises(KeyError):
        max_score_bound(idx, 42)


def test_max_score_bound_dominates_every_posting(rng):
    docs = [{int(t): float(rng.exponential()) for t in rng.choice(20, 4, replace=False)} for _ in range(200)]
    idx = build_sparse_index(enumerate(docs))
    for t, plist in idx.postings.items():
        assert max_score_bound(idx, t) >= idx.impact(plist.codes).max()


corpora = st.lists(
    st.dictionaries(st.integers(0, 15), st.floats(0, 4, allow_nan=False), min_size=1, max_size=6),
    min_size=1, max_size=60)


@settings(max_examples=150, deadline=None)
@given(corpora, st.dictionaries(st.integers(0, 15), st.floats(0, 3, allow_nan=False), max_size=6),
       st.integers(1, 70))
def test_exactness_property(docs, query, k):
    idx = build_sparse_index(enumerate(docs))
    got = top_k_sparse(idx, query, k)
    assert got == brute_sparse_topk(docs, query, k)
    assert got == top_k_sparse(idx, query, k)


def test_parse_and_format_roundtrip():
    v = SparseVector.parse("9:0.5 2:1.25")
    assert v.terms.tolist() == [2, 9] and v.weights.tolist() == [1.25, 0.5]
    assert SparseVector.parse(v.format()) == v
    with pytest.raises(ValueError):
        SparseVector.parse("7")


def test_save_load_roundtrip(tmp_path, rng):
    docs = [{int(t): float(rng.uniform(0, 5)) for t in rng.choice(30, 5, replace=False)} for _ in range(40)]
    idx = build_sparse_index(enumerate(docs))
    save_sparse_index(idx, tmp_path / "s.idx")
    loaded = load_sparse_index(tmp_path / "s.idx")
    assert loaded.num_docs == 40 and loaded.global_scale == idx.global_scale
    assert sorted(loaded.postings) == sorted(idx.postings)
    for t in idx.postings:
        assert np.array_equal(loaded.postings[t].doc_ids, idx.postings[t].doc_ids)
        assert np.array_equal(loaded.postings[t].codes, idx.postings[t].codes)
    q = {3: 1.0, 7: 0.5, 11: 2.0}
    assert top_k_sparse(loaded, q, 10) == top_k_sparse(idx, q, 10)
    (tmp_path / "t.idx").write_bytes((tmp_path / "s.idx").read_bytes()[:-1])
    with pytest.raises(ValueError):
        load_sparse_index(tmp_path / "t.idx")


def test_read_line_format(tmp_path):
    p = tmp_path / "docs.tsv"
    p.write_text("0\t3:1.0 5:0.5\n1\t5:2\n")
    assert [(d, v.format()) for d, v in read_sparse_vectors(p)] == [(0, "3:1.0 5:0.5"), (1, "5:2.0")]


def test_retriever_estimator(rng):
    docs = [{int(t): float(rng.uniform(0, 5)) for t in rng.choice(30, 5, replace=False)} for _ in range(30)]
    r = SparseRetriever(k=5).fit(docs)
    assert r.get_params() == {"k": 5}
    q = {1: 1.0, 2: 1.0}
    assert r.search(q) == brute_sparse_topk(docs, q, 5)
    assert r.set_params(k=2).predict([q])[0] == brute_sparse_topk(docs, q, 2)
