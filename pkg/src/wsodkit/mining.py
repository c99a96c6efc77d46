"""Supervision-box mining: iterative cluster-and-average over scored proposals.

Step 1 repeatedly seeds a cluster at the highest-scoring remaining proposal,
absorbs every remaining proposal whose IoU with the seed exceeds the cluster
threshold, and averages the member boxes into a created box. Step 2 drops
created boxes that do not touch the top-1 proposal's box (they cover other
instances of the class), averages the survivors (optionally weighted by box
area so boxes covering larger object parts dominate), and finally averages
that result with the top-1 box itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, box_from_row, boxes_to_array, pairwise_iou

SIZE_WEIGHT_MODES = ("uniform", "area")


@dataclass(frozen=True)
class MiningConfig:
    """Knobs for supervision-box mining.

    gamma1: IoU above which a proposal joins the current cluster.
    q: maximum number of clusters mined.
    size_weight_mode: "area" (default) weights the surviving created boxes by
        their area in step 2, so boxes covering larger object parts dominate
        the average; "uniform" disables that for ablation.
    """

    gamma1: float = 0.3
    q: int = 3
    size_weight_mode: str = "area"

    def __post_init__(self):
        if not 0.0 <= self.gamma1 <= 1.0:
            raise ValueError(f"gamma1 must be in [0, 1], got {self.gamma1!r}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q!r}")
        if self.size_weight_mode not in SIZE_WEIGHT_MODES:
            raise ValueError(
                f"size_weight_mode must be one of {SIZE_WEIGHT_MODES}, "
                f"got {self.size_weight_mode!r}"
            )


@dataclass(frozen=True)
class Cluster:
    """One mined cluster: member proposal indices and their averaged box."""

    members: tuple[int, ...]
    seed: int
    created: Box


@dataclass(frozen=True)
class MiningTrace:
    """Full record of one mining run."""

    clusters: tuple[Cluster, ...]
    eliminated: tuple[int, ...]  # indices into `clusters` removed in step 2
    fallback: bool  # True when every created box was eliminated
    final_box: Box


def _checked_arrays(
    scores: Sequence[float], boxes: Sequence[Box]
) -> tuple[np.ndarray, np.ndarray]:
    if len(boxes) == 0:
        raise ValueError("mining needs at least one proposal")
    if len(scores) != len(boxes):
        raise ValueError(f"{len(scores)} scores but {len(boxes)} boxes")
    score_arr = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(score_arr)):
        raise ValueError("scores must be finite")
    if isinstance(boxes, np.ndarray):
        box_arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    else:
        box_arr = boxes_to_array(boxes)
    return score_arr, box_arr


def _argmax_first(values: np.ndarray, candidates: np.ndarray) -> int:
    """Index (into the full array) of the max over candidates, lowest index on ties."""
    sub = values[candidates]
    return int(candidates[int(np.argmax(sub))])


def cluster_proposals(
    scores: Sequence[float], boxes: Sequence[Box], cfg: MiningConfig
) -> list[Cluster]:
    """Step 1: mine up to cfg.q clusters of mutually overlapping proposals.

    Each iteration seeds on the highest-scoring proposal still unassigned
    (ties broken by lower index), gathers the remaining proposals with
    IoU > gamma1 against the seed (the seed always joins its own cluster),
    averages their boxes uniformly, and removes the cluster from the pool.
    """
    score_arr, box_arr = _checked_arrays(scores, boxes)
    iou_mat = pairwise_iou(box_arr, box_arr)
    remaining = np.arange(box_arr.shape[0])
    clusters: list[Cluster] = []
    while remaining.size and len(clusters) < cfg.q:
        seed = _argmax_first(score_arr, remaining)
        in_cluster = iou_mat[seed, remaining] > cfg.gamma1
        in_cluster |= remaining == seed
        members = remaining[in_cluster]
        created = box_from_row(box_arr[members].mean(axis=0))
        clusters.append(Cluster(members=tuple(int(i) for i in members), seed=seed, created=created))
        remaining = remaining[~in_cluster]
    return clusters


def fuse_clusters(
    created: Sequence[Box], top_box: Box, cfg: MiningConfig
) -> tuple[Box, tuple[int, ...], bool]:
    """Step 2: filter multi-instance boxes, average survivors, blend with top box.

    Returns (final_box, eliminated_indices, fallback). A created box is
    eliminated when it has zero intersection area with the top-1 proposal's
    box. Survivors are averaged uniformly or with area-proportional weights,
    and the result is averaged (unweighted) with the top box. When everything
    is eliminated the top box itself is returned with fallback=True.
    """
    if len(created) == 0:
        raise ValueError("fuse_clusters needs at least one created box")
    arr = boxes_to_array(created)
    top = np.asarray(top_box.to_list())
    iw = np.minimum(arr[:, 2], top[2]) - np.maximum(arr[:, 0], top[0])
    ih = np.minimum(arr[:, 3], top[3]) - np.maximum(arr[:, 1], top[1])
    overlaps = (iw > 0.0) & (ih > 0.0)
    eliminated = tuple(int(i) for i in np.nonzero(~overlaps)[0])
    if not overlaps.any():
        return top_box, eliminated, True
    survivors = arr[overlaps]
    if cfg.size_weight_mode == "area":
        weights = (survivors[:, 2] - survivors[:, 0]) * (survivors[:, 3] - survivors[:, 1])
    else:
        weights = np.ones(survivors.shape[0])
    merged = (survivors * weights[:, None]).sum(axis=0) / weights.sum()
    final = box_from_row((merged + top) / 2.0)
    return final, eliminated, False


def mine_box(
    scores: Sequence[float], boxes: Sequence[Box], cfg: MiningConfig
) -> MiningTrace:
    """Run both mining steps and return the full trace.

    The step-2 anchor is the box of the globally highest-scoring proposal
    (ties broken by lower index).
    """
    score_arr, box_arr = _checked_arrays(scores, boxes)
    clusters = cluster_proposals(scores, boxes, cfg)
    top_box = box_from_row(box_arr[int(np.argmax(score_arr))])
    final, eliminated, fallback = fuse_clusters(
        [c.created for c in clusters], top_box, cfg
    )
    return MiningTrace(
        clusters=tuple(clusters),
        eliminated=eliminated,
        fallback=fallback,
        final_box=final,
    )
