from __future__ import annotations

from dataclasses import dataclass


@dataclass
class ScoredCandidate:
    """A document carrying its first-stage, reranker, and fused scores."""

    doc_id: int
    sparse_score: float | None = None
    dense_score: float | None = None
    fused_score: float | None = None


def rank_key(score: float, doc_id: int) -> tuple[float, int]:
    """Sort key: score descending, then ascending doc id."""
    return (-score, doc_id)
