"""Rank-based retrieval and classification metrics."""
from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, DimensionError, EvaluationError

DIRECTIONS = ("a2t", "t2a")


def _scores(S) -> np.ndarray:
    S = np.asarray(getattr(S, "data", S), dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"recall_at_k needs a square similarity matrix, got shape {S.shape}")
    return S


def match_ranks(S, direction: str = "a2t") -> np.ndarray:
    """0-based rank of the ground-truth (diagonal) item for every query.

    Ties are broken by ascending index: an equal-scoring candidate with a
    smaller index ranks ahead of the true match.
    """
    S = _scores(S)
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    M = S if direction == "a2t" else S.T
    diag = np.diag(M)[:, None]
    idx = np.arange(len(M))
    earlier = idx[None, :] < idx[:, None]
    return ((M > diag) | ((M == diag) & earlier)).sum(axis=1)


def recall_at_k(S, k: int, direction: str = "a2t") -> float:
    n = _scores(S).shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"K must lie in [1, {n}], got {k}")
    return float(np.mean(match_ranks(S, direction) < k))


def retrieval_report(S, ks: Sequence[int] = (1, 5, 10)) -> Dict[str, float]:
    n = _scores(S).shape[0]
    out = {}
    for d in DIRECTIONS:
        ranks = match_ranks(S, d)
        for k in ks:
            if k <= n:
                out[f"{d}_R@{k}"] = float(np.mean(ranks < k))
    return out


def argmax_first(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; numpy already returns the first maximum."""
    return np.asarray(scores).argmax(axis=1)


def accuracy(scores, labels) -> float:
    labels = np.asarray(labels)
    return float(np.mean(argmax_first(scores) == labels))


def average_precision(scores: np.ndarray, truth: np.ndarray) -> float:
    """AP of one class: mean precision at each positive's rank (ties by ascending index)."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    hits = np.asarray(truth, dtype=bool)[order]
    if not hits.any():
        raise EvaluationError("average precision needs at least one positive")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, truths) -> Tuple[float, list]:
    """Macro mAP over classes with >= 1 positive; returns (mAP, excluded class indices)."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths)
    if scores.shape != truths.shape or scores.ndim != 2:
        raise DimensionError(f"scores {scores.shape} and truths {truths.shape} must be equal 2-D shapes")
    positives = truths.astype(bool).sum(axis=0)
    if not positives.any():
        raise EvaluationError("truth matrix has no positive entries")
    excluded = [int(c) for c in np.flatnonzero(positives == 0)]
    aps = [average_precision(scores[:, c], truths[:, c]) for c in range(scores.shape[1]) if positives[c]]
    return float(np.mean(aps)), excluded
