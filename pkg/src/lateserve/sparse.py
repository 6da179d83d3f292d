"""Quantized-impact inverted index with exact MaxScore top-k retrieval.

Impacts are quantized globally to 8 bits: ``code = round(w * 255 / global_scale)``
where ``global_scale`` is the largest weight in the corpus. Query scores are
``sum_t q_t * code(t, d) * global_scale / 255`` over shared terms, ranked by
score descending with ties broken by ascending doc id.
"""

from __future__ import annotations

import heapq
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .validation import check_positive_int, check_sparse_entries

IMPACT_MAX = 255
DEFAULT_K = 200

SPARSE_MAGIC = b"SPIX"
SPARSE_VERSION = 1
_SPARSE_HEADER = struct.Struct("<4sIQQQd")

# relative margin absorbing summation-order rounding between bounds and scores
_BOUND_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class SparseVector:
    terms: np.ndarray
    weights: np.ndarray

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return np.array_equal(self.terms, other.terms) and np.array_equal(self.weights, other.weights)

    __hash__ = None

    @classmethod
    def from_entries(cls, entries, *, allow_empty: bool = True) -> "SparseVector":
        terms, weights = check_sparse_entries(entries, allow_empty=allow_empty)
        return cls(terms, weights)

    @classmethod
    def parse(cls, text: str) -> "SparseVector":
        """Parse ``term:weight term:weight ...`` (terms in any order, no duplicates)."""
        pairs = []
        for tok in text.split():
            term, _, weight = tok.partition(":")
            if not _:
                raise ValueError(f"malformed sparse entry {tok!r}")
            pairs.append((int(term), float(weight)))
        pairs.sort(key=lambda p: p[0])
        return cls.from_entries(pairs)

    def format(self) -> str:
        return " ".join(f"{t}:{w!r}" for t, w in zip(self.terms.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return int(self.terms.size)


@dataclass
class PostingList:
    term_id: int
    doc_ids: np.ndarray  # uint32, strictly increasing
    codes: np.ndarray  # uint8
    max_impact_code: int

    def __len__(self) -> int:
        return int(self.doc_ids.size)


@dataclass
class SparseIndex:
    num_docs: int
    global_scale: float
    postings: dict[int, PostingList] = field(default_factory=dict)

    def impact(self, code) -> np.ndarray | float:
        return np.asarray(code, dtype=np.float64) * (self.global_scale / IMPACT_MAX)

    @property
    def num_postings(self) -> int:
        return sum(len(p) for p in self.postings.values())


def _coerce_vector(vec) -> SparseVector:
    if isinstance(vec, SparseVector):
        return vec
    if isinstance(vec, str):
        return SparseVector.parse(vec)
    if isinstance(vec, Mapping):
        return SparseVector.from_entries(sorted(vec.items()))
    return SparseVector.from_entries(vec)


def build_sparse_index(doc_vectors: Iterable[tuple[int, object]]) -> SparseIndex:
    """Build an index from ``(doc_id, vector)`` pairs with doc ids ``0..N-1`` in order."""
    per_term: dict[int, tuple[list[int], list[float]]] = {}
    num_docs = 0
    peak = 0.0
    for expected, (doc_id, vec) in enumerate(doc_vectors):
        if int(doc_id) != expected:
            raise ValueError(f"doc ids must be dense and ordered: expected {expected}, got {doc_id}")
        vec = _coerce_vector(vec)
        if len(vec) == 0:
            raise ValueError(f"document {doc_id} has no terms")
        for t, w in zip(vec.terms.tolist(), vec.weights.tolist()):
            docs, weights = per_term.setdefault(t, ([], []))
            docs.append(expected)
            weights.append(w)
            peak = max(peak, w)
        num_docs += 1
    global_scale = peak if peak > 0 else 1.0
    index = SparseIndex(num_docs=num_docs, global_scale=global_scale)
    for t in sorted(per_term):
        docs, weights = per_term[t]
        codes = np.clip(np.rint(np.array(weights) * IMPACT_MAX / global_scale), 0, IMPACT_MAX).astype(np.uint8)
        index.postings[t] = PostingList(t, np.array(docs, dtype=np.uint32), codes, int(codes.max()))
    return index


def max_score_bound(index: SparseIndex, term_id: int) -> float:
    try:
        plist = index.postings[int(term_id)]
    except KeyError:
        raise KeyError(f"term {term_id} not in index") from None
    return float(index.impact(plist.max_impact_code))


class _Cursor:
    __slots__ = ("weight", "docs", "docs_arr", "impacts", "pos", "bound", "qidx")

    def __init__(self, qidx: int, weight: float, plist: PostingList, index: SparseIndex):
        self.qidx = qidx
        self.weight = weight
        self.docs_arr = plist.doc_ids
        self.docs = None
        self.impacts = index.impact(plist.codes).tolist()
        self.pos = 0
        self.bound = weight * float(index.impact(plist.max_impact_code))

    def doc(self) -> int | None:
        return self.docs[self.pos] if self.pos < len(self.docs) else None

    def seek(self, target: int) -> int | None:
        if self.pos < len(self.docs) and self.docs[self.pos] < target:
            self.pos = int(np.searchsorted(self.docs_arr, target, side="left"))
        return self.doc()


def top_k_sparse(index: SparseIndex, query, k: int = DEFAULT_K) -> list[tuple[int, float]]:
    """Exact top-k by document-at-a-time MaxScore traversal.

    Terms are ordered by upper bound; the lowest-bound prefix whose summed
    bounds cannot beat the current k-th score is never used to nominate
    candidates, only probed for documents already nominated.
    """
    k = check_positive_int(k, "k")
    query = _coerce_vector(query)
    cursors = []
    for qidx, (t, w) in enumerate(zip(query.terms.tolist(), query.weights.tolist())):
        plist = index.postings.get(t)
        if plist is not None and len(plist):
            cursors.append(_Cursor(qidx, w, plist, index))
    if not cursors:
        return []
    cursors.sort(key=lambda c: (c.bound, c.qidx))
    for c in cursors:
        c.docs = c.docs_arr.tolist()
    prefix = np.cumsum([c.bound for c in cursors]).tolist()

    heap: list[tuple[float, int]] = []  # (score, -doc_id); heap[0] is the current k-th best
    threshold = -np.inf
    first_essential = 0

    def beats(bound: float) -> bool:
        # conservative: only prune when the bound is clearly below the threshold
        if threshold == -np.inf:
            return True
        return bound >= threshold - _BOUND_SLACK * max(abs(threshold), 1.0)

    while True:
        essential = cursors[first_essential:]
        live = [c.doc() for c in essential]
        live = [d for d in live if d is not None]
        if not live:
            break
        doc = min(live)
        contributions: list[tuple[int, float]] = []
        partial = 0.0
        for c in essential:
            if c.pos < len(c.docs) and c.docs[c.pos] == doc:
                v = c.weight * c.impacts[c.pos]
                contributions.append((c.qidx, v))
                partial += v
                c.pos += 1
        pruned = False
        for i in range(first_essential - 1, -1, -1):
            if not beats(partial + prefix[i]):
                pruned = True
                break
            c = cursors[i]
            if c.seek(doc) == doc:
                v = c.weight * c.impacts[c.pos]
                contributions.append((c.qidx, v))
                partial += v
        if pruned:
            continue
        # canonical summation order so scores never depend on the traversal path
        contributions.sort()
        score = 0.0
        for _, v in contributions:
            score += v
        item = (score, -doc)
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
        else:
            continue
        if len(heap) == k:
            threshold = heap[0][0]
            while first_essential < len(cursors) and not beats(prefix[first_essential]):
                first_essential += 1
    ranked = sorted(heap, key=lambda it: (-it[0], -it[1]))
    return [(-neg, float(s)) for s, neg in ranked]


# -- persistence -----------------------------------------------------------

def save_sparse_index(index: SparseIndex, path: str | os.PathLike) -> None:
    """Write ``index`` in a deterministic little-endian binary layout.

    ``"SPIX" | u32 version | u64 num_docs | u64 num_terms | u64 num_postings | f64 global_scale``
    then ``num_terms`` x (u32 term_id, u64 start), a trailing u64 end, u32 doc ids, u8 codes.
    """
    terms = sorted(index.postings)
    starts = np.zeros(len(terms) + 1, dtype="<u8")
    for i, t in enumerate(terms):
        starts[i + 1] = starts[i] + len(index.postings[t])
    table = np.zeros(len(terms), dtype=[("term", "<u4"), ("start", "<u8")])
    table["term"] = terms
    table["start"] = starts[:-1]
    docs = np.concatenate([index.postings[t].doc_ids for t in terms]) if terms else np.zeros(0)
    codes = np.concatenate([index.postings[t].codes for t in terms]) if terms else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(_SPARSE_HEADER.pack(SPARSE_MAGIC, SPARSE_VERSION, index.num_docs, len(terms),
                                     int(starts[-1]), index.global_scale))
        fh.write(table.tobytes())
        fh.write(starts[-1:].tobytes())
        fh.write(docs.astype("<u4").tobytes())
        fh.write(codes.astype(np.uint8).tobytes())


def load_sparse_index(path: str | os.PathLike) -> SparseIndex:
    data = Path(path).read_bytes()
    if len(data) < _SPARSE_HEADER.size:
        raise ValueError(f"{path}: truncated sparse index")
    magic, version, num_docs, num_terms, num_postings, scale = _SPARSE_HEADER.unpack_from(data)
    if magic != SPARSE_MAGIC or version != SPARSE_VERSION:
        raise ValueError(f"{path}: not a sparse index (magic {magic!r}, version {version})")
    pos = _SPARSE_HEADER.size
    expected = pos + num_terms * 12 + 8 + num_postings * 5
    if len(data) != expected:
        raise ValueError(f"{path}: size {len(data)} does not match header (expected {expected})")
    table = np.frombuffer(data, dtype=[("term", "<u4"), ("start", "<u8")], count=num_terms, offset=pos)
    pos += num_terms * 12
    (end,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    docs = np.frombuffer(data, dtype="<u4", count=num_postings, offset=pos).astype(np.uint32)
    pos += num_postings * 4
    codes = np.frombuffer(data, dtype=np.uint8, count=num_postings, offset=pos).copy()
    bounds = np.append(table["start"].astype(np.int64), end)
    index = SparseIndex(num_docs=num_docs, global_scale=scale)
    for i, t in enumerate(table["term"].tolist()):
        lo, hi = bounds[i], bounds[i + 1]
        c = codes[lo:hi]
        index.postings[t] = PostingList(t, docs[lo:hi], c, int(c.max()) if c.size else 0)
    return index


def read_sparse_vectors(path: str | os.PathLike) -> list[tuple[int, SparseVector]]:
    """Parse ``doc_id<TAB>term:weight ...`` lines."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            doc_id, sep, rest = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected doc_id<TAB>term:weight ...")
            try:
                out.append((int(doc_id), SparseVector.parse(rest)))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


class SparseRetriever(BaseEstimator):
    """Estimator wrapper: ``fit`` builds the inverted index, ``search`` runs top-k.

    Parameters
    ----------
    k : int, default=200
        Number of candidates returned per query.
    """

    def __init__(self, k: int = DEFAULT_K):
        self.k = k

    def fit(self, X: Sequence, y=None) -> "SparseRetriever":
        """``X`` is a sequence of sparse document vectors; position is the doc id."""
        check_positive_int(self.k, "k")
        self.index_ = build_sparse_index(enumerate(X))
        self.n_docs_ = self.index_.num_docs
        return self

    def search(self, query, k: int | None = None) -> list[tuple[int, float]]:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "index_")
        return top_k_sparse(self.index_, query, self.k if k is None else k)

    def predict(self, X: Sequence) -> list[list[tuple[int, float]]]:
        return [self.search(q) for q in X]
