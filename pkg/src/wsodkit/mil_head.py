"""Attention-MIL scoring head, pseudo-label assignment, and training losses.

The bag-level head has a classification branch and an attention branch over
the encoded proposal features. Proposal n's score for class c is

    x_cn = sigmoid(cls_logit_nc) * softmax_over_proposals(attn_logit_.c)_n

so the per-class attention weights form a distribution over proposals and the
image-level aggregate p_c = sum_n x_cn always lands in (0, 1), keeping the
binary cross-entropy bag loss finite.

Refinement stages are (C+1)-way per-proposal softmax classifiers trained
against pseudo-labels: a proposal is labeled class c when its IoU with that
class's supervision box exceeds gamma2 (highest IoU wins across classes),
background otherwise, with an optional mid-overlap ignore band excluded from
the loss. A class-specific regression branch is trained with Smooth L1
toward the matched supervision box.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, boxes_to_array, pairwise_iou

CLAMP_EPS = 1e-7


# ---------------------------------------------------------------------------
# bag-level head
# ---------------------------------------------------------------------------

def init_mil_params(
    feature_dim: int, num_classes: int, rng: np.random.Generator, std: float = 0.05
) -> dict[str, np.ndarray]:
    return {
        "mil.cls.w": rng.normal(0.0, std, size=(feature_dim, num_classes)),
        "mil.cls.b": np.zeros(num_classes),
        "mil.attn.w": rng.normal(0.0, std, size=(feature_dim, num_classes)),
        "mil.attn.b": np.zeros(num_classes),
    }


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_columns(z: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 of an (N, C) array, independently per column."""
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def bag_head_forward(
    v: np.ndarray, params: Mapping[str, np.ndarray]
) -> tuple[np.ndarray, dict]:
    """Proposal score matrix X (C x N) plus cache for the backward pass."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != params["mil.cls.w"].shape[0]:
        raise ValueError(
            f"features must be (N, {params['mil.cls.w'].shape[0]}), got {v.shape}"
        )
    s = _sigmoid(v @ params["mil.cls.w"] + params["mil.cls.b"])  # (N, C)
    a = _softmax_columns(v @ params["mil.attn.w"] + params["mil.attn.b"])  # (N, C)
    x = (s * a).T  # (C, N)
    return x, {"v": v, "s": s, "a": a}


def score_proposals(v: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    """Class-by-proposal score matrix X of shape (C, N)."""
    x, _ = bag_head_forward(v, params)
    return x


def bag_aggregate(x: np.ndarray) -> np.ndarray:
    """Image-level class probabilities p_c = sum_n x_cn."""
    return np.asarray(x, dtype=np.float64).sum(axis=1)


def bag_loss(p: np.ndarray, y: np.ndarray) -> float:
    """Multi-class binary cross entropy between aggregates p and bag label y."""
    p = np.clip(np.asarray(p, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"p has shape {p.shape} but y has shape {y.shape}")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())


def bag_backward(
    cache: dict, params: Mapping[str, np.ndarray], y: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Loss, aggregate p, gradient w.r.t. features, and parameter gradients."""
    s, a, v = cache["s"], cache["a"], cache["v"]
    y = np.asarray(y, dtype=np.float64)
    p_raw = (s * a).sum(axis=0)  # (C,)
    loss = bag_loss(p_raw, y)
    inside = (p_raw > CLAMP_EPS) & (p_raw < 1.0 - CLAMP_EPS)
    p = np.clip(p_raw, CLAMP_EPS, 1.0 - CLAMP_EPS)
    dp = np.where(inside, -y / p + (1.0 - y) / (1.0 - p), 0.0)  # (C,)

    dx = np.broadcast_to(dp, s.shape)  # dL/dx_cn laid out as (N, C)
    ds = dx * a
    da = dx * s
    dz_cls = ds * s * (1.0 - s)
    dz_attn = a * (da - (da * a).sum(axis=0, keepdims=True))
    grads = {
        "mil.cls.w": v.T @ dz_cls,
        "mil.cls.b": dz_cls.sum(axis=0),
        "mil.attn.w": v.T @ dz_attn,
        "mil.attn.b": dz_attn.sum(axis=0),
    }
    dv = dz_cls @ params["mil.cls.w"].T + dz_attn @ params["mil.attn.w"].T
    return loss, p_raw, dv, grads


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabelSet:
    """Per-proposal assignments against per-class supervision boxes.

    labels[n] is a class id in [0, num_classes) for foreground, num_classes
    for background, or -1 for proposals in the ignore band. target_boxes[n]
    holds the matched supervision box coordinates for foreground rows.
    """

    labels: np.ndarray
    weights: np.ndarray
    target_boxes: np.ndarray
    num_classes: int
    sup_boxes: dict[int, tuple[Box, ...]]

    @property
    def background_id(self) -> int:
        return self.num_classes

    @property
    def foreground(self) -> np.ndarray:
        return (self.labels >= 0) & (self.labels < self.num_classes)

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == -1

    @property
    def counted(self) -> np.ndarray:
        return ~self.ignored


def _as_box_tuple(value) -> tuple[Box, ...]:
    if isinstance(value, Box):
        return (value,)
    return tuple(value)


def assign_pseudo_labels(
    boxes: Sequence[Box],
    sup_box_per_class: Mapping[int, Box | Sequence[Box]],
    gamma2: float,
    num_classes: int,
    iou_ign_threshold: float | None = None,
    confidences: Mapping[int, Sequence[float]] | None = None,
) -> PseudoLabelSet:
    """Label proposals against supervision boxes at IoU threshold gamma2.

    A class may supply several supervision boxes; the proposal's IoU for the
    class is the max over them, and the class with the highest IoU wins
    (ties broken by lower class id). With an ignore threshold set, proposals
    whose best IoU falls in (iou_ign_threshold, gamma2] are excluded from
    the loss. `confidences` optionally carries one score per supervision box;
    each proposal then takes the confidence of the box that determined its
    label, otherwise all weights are 1.
    """
    if not 0.0 <= gamma2 <= 1.0:
        raise ValueError(f"gamma2 must be in [0, 1], got {gamma2!r}")
    if iou_ign_threshold is not None and not 0.0 <= iou_ign_threshold <= 1.0:
        raise ValueError(f"iou_ign_threshold must be in [0, 1], got {iou_ign_threshold!r}")
    sup = {int(c): _as_box_tuple(v) for c, v in sup_box_per_class.items()}
    for c in sup:
        if not 0 <= c < num_classes:
            raise ValueError(f"supervision class {c} outside [0, {num_classes})")
    n = len(boxes)
    labels = np.full(n, num_classes, dtype=np.int64)
    weights = np.ones(n, dtype=np.float64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if n == 0 or not sup:
        return PseudoLabelSet(labels, weights, targets, num_classes, sup)

    prop_arr = boxes_to_array(boxes)
    best_iou = np.zeros(n)
    best_target = np.zeros((n, 4))
    best_conf = np.ones(n)
    matched = np.zeros(n, dtype=bool)
    for c in sorted(sup):
        class_boxes = sup[c]
        ious = pairwise_iou(prop_arr, boxes_to_array(class_boxes))  # (N, B)
        which = ious.argmax(axis=1)
        class_iou = ious[np.arange(n), which]
        better = class_iou > best_iou
        take = better | (~matched & (class_iou >= best_iou))
        if confidences is not None and c in confidences:
            conf = np.asarray(confidences[c], dtype=np.float64)[which]
        else:
            conf = np.ones(n)
        labels = np.where(take & (class_iou > gamma2), c, labels)
        best_target[take] = boxes_to_array(class_boxes)[which[take]]
        best_conf[take] = conf[take]
        best_iou = np.where(take, class_iou, best_iou)
        matched |= take

    foreground = (labels >= 0) & (labels < num_classes)
    if iou_ign_threshold is not None:
        band = ~foreground & (best_iou > iou_ign_threshold)
        labels = np.where(band, -1, labels)
    weights = best_conf
    targets[foreground] = best_target[foreground]
    return PseudoLabelSet(labels, weights, targets, num_classes, sup)


# ---------------------------------------------------------------------------
# refinement stage loss
# ---------------------------------------------------------------------------

def refinement_loss(xk: np.ndarray, labels: PseudoLabelSet) -> float:
    """Mean negative log-likelihood of the assigned labels over counted proposals.

    xk is a (C+1) x N matrix whose columns are probability vectors (softmax
    over the C classes plus background). Ignored proposals contribute
    nothing; an all-ignored set yields 0 with a warning.
    """
    xk = np.asarray(xk, dtype=np.float64)
    c1 = labels.num_classes + 1
    n = labels.labels.shape[0]
    if xk.shape != (c1, n):
        raise ValueError(f"score matrix must be ({c1}, {n}), got {xk.shape}")
    col_sums = xk.sum(axis=0)
    if np.any(xk < -1e-12) or not np.allclose(col_sums, 1.0, atol=1e-6):
        raise ValueError("columns must be probability vectors over C+1 classes")
    counted = labels.counted
    if not counted.any():
        warnings.warn("all proposals ignored; refinement loss is an empty sum")
        return 0.0
    idx = np.nonzero(counted)[0]
    probs = xk[labels.labels[idx], idx]
    terms = labels.weights[idx] * np.log(np.clip(probs, CLAMP_EPS, None))
    return float(-terms.sum() / idx.size)


def stage_logit_grad(probs: np.ndarray, labels: PseudoLabelSet) -> np.ndarray:
    """Gradient of refinement_loss w.r.t. the pre-softmax logits, (C+1) x N."""
    c1, n = probs.shape
    grad = np.zeros((c1, n), dtype=np.float64)
    counted = labels.counted
    m = int(counted.sum())
    if m == 0:
        return grad
    idx = np.nonzero(counted)[0]
    w = labels.weights[idx] / m
    grad[:, idx] = probs[:, idx] * w
    grad[labels.labels[idx], idx] -= w
    return grad


# ---------------------------------------------------------------------------
# regression branch
# ---------------------------------------------------------------------------

def init_regression_params(
    feature_dim: int, num_classes: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    # Zero-init so untrained inference applies identity offsets.
    return {
        "reg.w": np.zeros((feature_dim, 4 * num_classes)),
        "reg.b": np.zeros(4 * num_classes),
    }


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> float:
    """Sum over components of the Huber-style penalty with unit transition."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    ad = np.abs(d)
    return float(np.where(ad < 1.0, 0.5 * d * d, ad - 0.5).sum())


def smooth_l1_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def regression_targets(proposal: Box, sup: Box) -> np.ndarray:
    """Center/size offsets (dx/w, dy/h, log(w'/w), log(h'/h))."""
    pw, ph = proposal.width, proposal.height
    return np.array(
        [
            ((sup.x1 + sup.x2) - (proposal.x1 + proposal.x2)) / 2.0 / pw,
            ((sup.y1 + sup.y2) - (proposal.y1 + proposal.y2)) / 2.0 / ph,
            math.log(sup.width / pw),
            math.log(sup.height / ph),
        ]
    )


def decode_regression(
    proposal: Box,
    deltas: np.ndarray,
    image_width: float | None = None,
    image_height: float | None = None,
    min_size: float = 1e-3,
) -> Box:
    """Invert regression_targets, clipping to image bounds when given."""
    dx, dy, dw, dh = (float(d) for d in deltas)
    cx = (proposal.x1 + proposal.x2) / 2.0 + dx * proposal.width
    cy = (proposal.y1 + proposal.y2) / 2.0 + dy * proposal.height
    # Clamp only guards exp overflow; real targets stay far inside this range.
    w = proposal.width * math.exp(min(max(dw, -50.0), 50.0))
    h = proposal.height * math.exp(min(max(dh, -50.0), 50.0))
    x1, x2 = cx - w / 2.0, cx + w / 2.0
    y1, y2 = cy - h / 2.0, cy + h / 2.0
    if image_width is not None:
        x1 = min(max(x1, 0.0), image_width - min_size)
        x2 = min(max(x2, x1 + min_size), image_width)
    if image_height is not None:
        y1 = min(max(y1, 0.0), image_height - min_size)
        y2 = min(max(y2, y1 + min_size), image_height)
    if x2 <= x1:
        x2 = x1 + min_size
    if y2 <= y1:
        y2 = y1 + min_size
    return Box(x1, y1, x2, y2)
