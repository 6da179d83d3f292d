"""Score normalization and alpha-interpolated hybrid ranking.

The fused score of a candidate is::

    alpha * N(sparse)[i] + (1 - alpha) * N(dense)[i]

with ``N`` computed over the candidate list of a single query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .types import ScoredCandidate, rank_key
from .validation import check_alpha, check_scores

NORMALIZATIONS = ("znorm", "minmax", "linear01")
DEFAULT_ALPHA = 0.3


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = DEFAULT_ALPHA
    normalization: str = "znorm"

    def __post_init__(self):
        object.__setattr__(self, "alpha", check_alpha(self.alpha))
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}")


def _stats(x: np.ndarray, kind: str) -> tuple[float, float, float, float | None]:
    """Return (center, center_lo, scale, constant) with N(x) = ((x - center) - center_lo) / scale.

    ``center_lo`` carries the part of the mean lost when rounding it to one
    float, which matters when the spread is tiny next to the offset.
    ``constant`` is set when the input is degenerate and every output takes that value.
    """
    if kind == "znorm":
        mean = float(x.mean())
        dev = x - mean
        lo = float(dev.mean())
        dev = dev - lo
        peak = float(np.abs(dev).max())
        if np.ptp(x) == 0 or peak == 0:
            return 0.0, 0.0, 1.0, 0.0
        # population stddev, rescaled first so tiny or huge deviations neither underflow nor overflow
        return mean, lo, peak * float(np.sqrt(np.mean((dev / peak) ** 2))), None
    if kind == "minmax":
        lo, hi = float(x.min()), float(x.max())
        if hi == lo:
            return 0.0, 0.0, 1.0, 0.5
        return lo, 0.0, hi - lo, None
    if kind == "linear01":
        peak = float(np.abs(x).max())
        return 0.0, 0.0, (peak if peak > 0 else 1.0), None
    raise ValueError(f"unknown normalization {kind!r}; expected one of {NORMALIZATIONS}")


def _apply(x: np.ndarray, stats) -> np.ndarray:
    center, center_lo, scale, constant = stats
    if constant is not None:
        return np.full_like(x, constant)
    return ((x - center) - center_lo) / scale


def znorm(scores: Sequence[float]) -> np.ndarray:
    """(x - mean) / population stddev; constant input maps to zeros."""
    x = check_scores(scores)
    return _apply(x, _stats(x, "znorm"))


def normalize(scores: Sequence[float], kind: str = "znorm") -> np.ndarray:
    """Normalize one query's scores.

    ``minmax`` maps min to 0 and max to 1 (constant input gives 0.5);
    ``linear01`` divides by the max absolute value (all-zero input is unchanged).
    """
    if kind == "znorm":
        return znorm(scores)
    x = check_scores(scores)
    return _apply(x, _stats(x, kind))


def fuse_scores(sparse: Sequence[float], dense: Sequence[float], config: FusionConfig) -> np.ndarray:
    s = normalize(sparse, config.normalization)
    d = normalize(dense, config.normalization)
    if s.shape != d.shape:
        raise ValueError("sparse and dense score lists differ in length")
    return config.alpha * s + (1.0 - config.alpha) * d


def hybrid_rank(candidates: Sequence[ScoredCandidate], config: FusionConfig) -> list[ScoredCandidate]:
    """Fill ``fused_score`` on copies of ``candidates`` and rank them.

    At alpha 0 (or 1) the fused score is the normalized dense (or sparse) score
    alone; normalization is monotone, so the order is taken from the raw stage
    scores to keep it immune to rounding collisions.
    """
    if not isinstance(config, FusionConfig):
        raise TypeError("config must be a FusionConfig")
    if not candidates:
        return []
    for c in candidates:
        if c.sparse_score is None or c.dense_score is None:
            raise ValueError(f"candidate {c.doc_id} lacks a stage score")
    sparse = [c.sparse_score for c in candidates]
    dense = [c.dense_score for c in candidates]
    fused = fuse_scores(sparse, dense, config)
    out = [ScoredCandidate(c.doc_id, c.sparse_score, c.dense_score, float(f))
           for c, f in zip(candidates, fused)]
    if config.alpha == 0.0:
        out.sort(key=lambda c: rank_key(c.dense_score, c.doc_id))
    elif config.alpha == 1.0:
        out.sort(key=lambda c: rank_key(c.sparse_score, c.doc_id))
    else:
        out.sort(key=lambda c: rank_key(c.fused_score, c.doc_id))
    return out


class ScoreNormalizer(TransformerMixin, BaseEstimator):
    """Column-wise score normalizer with the three supported schemes.

    ``fit`` learns per-column statistics; ``fit_transform`` on a single column
    equals :func:`normalize` exactly.
    """

    def __init__(self, kind: str = "znorm"):
        self.kind = kind

    def fit(self, X, y=None):
        if self.kind not in NORMALIZATIONS:
            raise ValueError(f"kind must be one of {NORMALIZATIONS}, got {self.kind!r}")
        X = self._as_2d(X)
        self.stats_ = [_stats(X[:, j], self.kind) for j in range(X.shape[1])]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        was_1d = np.ndim(X) == 1
        X = self._as_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        out = np.column_stack([_apply(X[:, j], st) for j, st in enumerate(self.stats_)])
        return out[:, 0] if was_1d else out

    @staticmethod
    def _as_2d(X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return check_array(X, dtype=np.float64)


class HybridRanker(BaseEstimator):
    """Stateless estimator fusing (sparse, dense) score columns for one query.

    Parameters
    ----------
    alpha : float, default=0.3
        Weight of the normalized sparse score; ``1 - alpha`` goes to the dense score.
    normalization : {"znorm", "minmax", "linear01"}, default="znorm"
    """

    def __init__(self, alpha: float = DEFAULT_ALPHA, normalization: str = "znorm"):
        self.alpha = alpha
        self.normalization = normalization

    @property
    def config(self) -> FusionConfig:
        return FusionConfig(self.alpha, self.normalization)

    def fit(self, X=None, y=None):
        self.config_ = self.config
        return self

    def predict(self, X) -> np.ndarray:
        """``X`` has shape (n_candidates, 2): sparse scores, then dense scores."""
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError("X must have exactly two columns (sparse, dense)")
        return fuse_scores(X[:, 0], X[:, 1], self.config)

    def rank(self, candidates: Sequence[ScoredCandidate]) -> list[ScoredCandidate]:
        return hybrid_rank(candidates, self.config)
