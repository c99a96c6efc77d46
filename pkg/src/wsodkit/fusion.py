"""Recency-weighted fusion of earlier refinement stages' score matrices.

Stage k's supervision scores are a convex combination of the stage-1..k-1
score matrices. With history length k-1 and recency step delta, the raw
coefficients are

    a_i = 1 - (k - i - 1) * delta          for i < k - 1
    a_{k-1} = 1 + (k - 1)(k - 2) / 2 * delta

and each matrix S_i is weighted by a_i / (k - 1). The delta terms cancel in
the sum (sum_{i<k-1} (k-i-1) = (k-1)(k-2)/2), so the weights always add up
to one, and later stages always receive at least as much weight as earlier
ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class FusionConfig:
    """delta: recency step; k_max: largest stage index the config must support."""

    delta: float = 0.1
    k_max: int = 3

    def __post_init__(self):
        if self.delta < 0.0 or not np.isfinite(self.delta):
            raise ValueError(f"delta must be finite and >= 0, got {self.delta!r}")
        if self.k_max < 1:
            raise ValueError(f"k_max must be >= 1, got {self.k_max!r}")
        if self.k_max >= 2 and 1.0 - (self.k_max - 2) * self.delta < 0.0:
            raise ValueError(
                f"delta={self.delta} yields a negative weight at k={self.k_max}; "
                f"need 1 - (k_max - 2) * delta >= 0"
            )


def recency_weights(k: int, delta: float) -> np.ndarray:
    """Normalized weights for the k-1 history matrices supervising stage k."""
    if k < 2:
        raise ValueError(f"stage index k must be >= 2, got {k!r}")
    if delta < 0.0 or not np.isfinite(delta):
        raise ValueError(f"delta must be finite and >= 0, got {delta!r}")
    i = np.arange(1, k, dtype=np.float64)
    alpha = 1.0 - (k - i - 1.0) * delta
    alpha[-1] = 1.0 + (k - 1.0) * (k - 2.0) / 2.0 * delta
    if np.any(alpha < 0.0):
        worst = int(np.argmin(alpha)) + 1
        raise ValueError(
            f"delta={delta} gives negative weight alpha_{worst}={alpha[worst - 1]:.6g} "
            f"at k={k}; reduce delta so 1 - (k - 2) * delta >= 0"
        )
    return alpha / (k - 1.0)


def fuse_history(history: Sequence[np.ndarray], delta: float) -> np.ndarray:
    """Weighted sum of the stage-1..k-1 score matrices (k = len(history) + 1).

    All matrices must share one shape. An empty history is rejected: stage 1
    is supervised by the bag-level score matrix directly, not by fusion.
    """
    if len(history) == 0:
        raise ValueError("history is empty; stage 1 takes its supervision directly")
    mats = [np.asarray(m, dtype=np.float64) for m in history]
    shape = mats[0].shape
    for idx, m in enumerate(mats):
        if m.shape != shape:
            raise ValueError(
                f"history matrix {idx} has shape {m.shape}, expected {shape}"
            )
    weights = recency_weights(len(mats) + 1, delta)
    out = np.zeros(shape, dtype=np.float64)
    for w, m in zip(weights, mats):
        out += w * m
    return out
