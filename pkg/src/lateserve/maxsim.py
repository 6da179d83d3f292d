"""Late-interaction (MaxSim) scoring and candidate reranking."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .store import DocEmbeddings, StoreHandle
from .types import ScoredCandidate, rank_key
from .validation import check_token_matrix


def maxsim_score(query, doc) -> float:
    """Sum over query tokens of the best dot product against any document token."""
    q = check_token_matrix(query, name="query")
    d = doc.tokens if isinstance(doc, DocEmbeddings) else doc
    d = check_token_matrix(d, name="document")
    if q.shape[1] != d.shape[1]:
        raise ValueError(f"query dim {q.shape[1]} does not match document dim {d.shape[1]}")
    return float((q @ d.T).max(axis=1).sum())


def rerank(candidates: Iterable, query, store: StoreHandle) -> list[ScoredCandidate]:
    """Score each candidate with MaxSim over its stored embeddings.

    ``candidates`` holds ``(doc_id, sparse_score)`` pairs or ScoredCandidates.
    Only the candidates' byte ranges are read from the store.
    """
    q = check_token_matrix(query, dim=store.manifest.dim, name="query")
    out = []
    for cand in candidates:
        if isinstance(cand, ScoredCandidate):
            doc_id, sparse = cand.doc_id, cand.sparse_score
        else:
            doc_id, sparse = cand
        try:
            doc = store.get(doc_id)
        except IndexError as exc:
            raise IndexError(f"rerank: invalid candidate doc_id {doc_id}") from exc
        dense = float((q @ doc.tokens.T).max(axis=1).sum())
        out.append(ScoredCandidate(int(doc_id), sparse_score=sparse, dense_score=dense))
    out.sort(key=lambda c: rank_key(c.dense_score, c.doc_id))
    return out


def exhaustive_search(query, store: StoreHandle, k: int, block_bytes: int = 1 << 22) -> list[tuple[int, float]]:
    """MaxSim over every stored document; reference mode, reads the whole payload."""
    q = check_token_matrix(query, dim=store.manifest.dim, name="query")
    n = store.manifest.num_docs
    scores = np.empty(n, dtype=np.float64)
    for first, end, tokens, owner in store.iter_blocks(block_bytes):
        sims = q @ tokens.T  # (n_query_tokens, n_block_tokens)
        starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
        scores[first:end] = np.maximum.reduceat(sims, starts, axis=1).sum(axis=0)
    if n == 0:
        return []
    ids = np.arange(n)
    order = np.lexsort((ids, -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]
