"""Binary-relevance ranking metrics: MRR@k, Recall@k, Success@k.

Queries present in the judgments but missing from the run score 0.
"""

from __future__ import annotations

import os
from typing import Callable, Mapping, Sequence

Qrels = Mapping[str, set]
Run = Mapping[str, Sequence]


def _check(qrels: Qrels, k: int) -> None:
    if not qrels:
        raise ValueError("qrels is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")


def _mean(run: Run, qrels: Qrels, k: int, per_query: Callable[[Sequence, set], float]) -> float:
    _check(qrels, k)
    total = 0.0
    for qid, relevant in qrels.items():
        if not relevant:
            raise ValueError(f"query {qid!r} has no relevant documents")
        total += per_query(list(run.get(qid, ()))[:k], set(relevant))
    return total / len(qrels)


def _reciprocal_rank(top: Sequence, relevant: set) -> float:
    for rank, doc in enumerate(top, 1):
        if doc in relevant:
            return 1.0 / rank
    return 0.0


def mrr_at_k(run: Run, qrels: Qrels, k: int = 10) -> float:
    return _mean(run, qrels, k, _reciprocal_rank)


def recall_at_k(run: Run, qrels: Qrels, k: int) -> float:
    return _mean(run, qrels, k, lambda top, rel: len(rel.intersection(top)) / len(rel))


def success_at_k(run: Run, qrels: Qrels, k: int) -> float:
    return _mean(run, qrels, k, lambda top, rel: float(any(d in rel for d in top)))


METRICS = {"mrr": mrr_at_k, "recall": recall_at_k, "success": success_at_k}


def parse_metric(metric: str) -> tuple[str, int]:
    """``"mrr@10"`` -> ``("mrr", 10)``."""
    name, sep, k = metric.strip().lower().partition("@")
    if name not in METRICS or not sep:
        raise ValueError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)} with @k")
    return name, int(k)


def evaluate(run: Run, qrels: Qrels, metrics: Sequence[str]) -> dict[str, float]:
    out = {}
    for metric in metrics:
        name, k = parse_metric(metric)
        out[f"{name}@{k}"] = METRICS[name](run, qrels, k)
    return out


def read_qrels(path: str | os.PathLike) -> dict[str, set[str]]:
    """``query_id<TAB>doc_id`` lines."""
    qrels: dict[str, set[str]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>doc_id")
            qrels.setdefault(parts[0], set()).add(parts[1])
    return qrels


def read_run(path: str | os.PathLike) -> dict[str, list[str]]:
    """``query_id<TAB>doc_id<TAB>rank<TAB>score`` lines, ordered by rank per query."""
    rows: dict[str, list[tuple[int, str]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected query_id<TAB>doc_id<TAB>rank<TAB>score")
            qid, doc, rank, _score = parts
            rows.setdefault(qid, []).append((int(rank), doc))
    run = {}
    for qid, pairs in rows.items():
        docs = [doc for _, doc in sorted(pairs)]
        if len(set(docs)) != len(docs):
            raise ValueError(f"run has duplicate documents for query {qid!r}")
        run[qid] = docs
    return run


def write_run(run: Mapping[str, Sequence[tuple[object, float]]], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for qid, ranked in run.items():
            for rank, (doc, score) in enumerate(ranked, 1):
                fh.write(f"{qid}\t{doc}\t{rank}\t{score!r}\n")
