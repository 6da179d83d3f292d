"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def check_token_matrix(tokens, dim: int | None = None, name: str = "tokens") -> np.ndarray:
    """Validate a (num_tokens, dim) real matrix and return it as float64.

    A 1-D input is treated as a single token.
    """
    arr = np.asarray(tokens, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    arr = check_array(arr, dtype=np.float64, ensure_min_samples=1, ensure_min_features=1,
                      input_name=name)
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"{name} has width {arr.shape[1]}, expected dim={dim}")
    return arr


def check_scores(scores, name: str = "scores") -> np.ndarray:
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_sparse_entries(entries, *, allow_empty: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Validate (term_id, weight) pairs; term ids strictly increasing, weights >= 0."""
    if isinstance(entries, dict):
        entries = sorted(entries.items())
    pairs = list(entries)
    if not pairs and not allow_empty:
        raise ValueError("sparse vector must have at least one entry")
    terms = np.array([int(t) for t, _ in pairs], dtype=np.int64)
    weights = np.array([float(w) for _, w in pairs], dtype=np.float64)
    if terms.size and terms.min() < 0:
        raise ValueError("term ids must be non-negative")
    if terms.size > 1:
        diffs = np.diff(terms)
        if np.any(diffs == 0):
            dup = int(terms[1:][diffs == 0][0])
            raise ValueError(f"duplicate term {dup} in sparse vector")
        if np.any(diffs < 0):
            raise ValueError("term ids must be strictly increasing")
    if weights.size and (np.any(weights < 0) or not np.all(np.isfinite(weights))):
        raise ValueError("sparse weights must be finite and non-negative")
    return terms, weights
