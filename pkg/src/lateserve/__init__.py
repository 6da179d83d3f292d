"""Multi-stage late-interaction retrieval over a memory-mapped quantized index."""

from .fusion import (
    FusionConfig,
    HybridRanker,
    ScoreNormalizer,
    hybrid_rank,
    normalize,
    znorm,
)
from .maxsim import exhaustive_search, maxsim_score, rerank
from .sparse import (
    SparseIndex,
    SparseRetriever,
    SparseVector,
    build_sparse_index,
    max_score_bound,
    top_k_sparse,
)
from .store import (
    DocEmbeddings,
    StoreHandle,
    StoreManifest,
    build_store,
    get_doc_embeddings,
    open_store,
    resident_bytes,
)
from .types import ScoredCandidate

__version__ = "0.1.0"

__all__ = [
    "DocEmbeddings",
    "FusionConfig",
    "HybridRanker",
    "ScoreNormalizer",
    "ScoredCandidate",
    "SparseIndex",
    "SparseRetriever",
    "SparseVector",
    "StoreHandle",
    "StoreManifest",
    "build_sparse_index",
    "build_store",
    "exhaustive_search",
    "get_doc_embeddings",
    "hybrid_rank",
    "max_score_bound",
    "maxsim_score",
    "normalize",
    "open_store",
    "rerank",
    "resident_bytes",
    "top_k_sparse",
    "znorm",
]
