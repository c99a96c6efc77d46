"""Independent straight-line reference implementations used as test oracles.

Nothing here imports from the package under test except plain data types in
the test modules themselves; every algorithm below is written directly from
its definition with its own helper arithmetic, deliberately in a different
style from the production code (scalar loops, explicit sums).
"""

from __future__ import annotations

import math
from fractions import Fraction


# ---------------------------------------------------------------------------
# plain-list box helpers (not the package's geometry module)
# ---------------------------------------------------------------------------

def iou_ref(a, b) -> float:
    ix1 = max(a[0], b[0])
    iy1 = max(a[1], b[1])
    ix2 = min(a[2], b[2])
    iy2 = min(a[3], b[3])
    iw = ix2 - ix1
    ih = iy2 - iy1
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def overlaps_ref(a, b) -> bool:
    return (
        min(a[2], b[2]) - max(a[0], b[0]) > 0.0
        and min(a[3], b[3]) - max(a[1], b[1]) > 0.0
    )


# ---------------------------------------------------------------------------
# greedy NMS
# ---------------------------------------------------------------------------

def nms_reference(dets, threshold: float):
    """dets: list of (box4, score, class_id). Returns kept indices in output order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept = []
    for i in order:
        box_i, _score_i, class_i = dets[i]
        suppressed = False
        for j in kept:
            if dets[j][2] == class_i and iou_ref(box_i, dets[j][0]) > threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return kept


# ---------------------------------------------------------------------------
# two-step supervision-box mining
# ---------------------------------------------------------------------------

def mining_reference(scores, boxes, gamma1: float, q: int, size_weight_mode: str = "uniform"):
    """Direct transliteration of the cluster-average-filter-fuse procedure.

    boxes: list of [x1, y1, x2, y2]. Returns
    (cluster member lists, eliminated created-box indices, fallback, final box).
    """
    pool = list(range(len(boxes)))
    clusters = []
    created = []
    for _ in range(q):
        if not pool:
            break
        seed = pool[0]
        for i in pool:
            if scores[i] > scores[seed]:
                seed = i
        members = [
            i for i in pool if i == seed or iou_ref(boxes[i], boxes[seed]) > gamma1
        ]
        avg = [sum(boxes[i][k] for i in members) / len(members) for k in range(4)]
        clusters.append(members)
        created.append(avg)
        pool = [i for i in pool if i not in members]

    top = 0
    for i in range(len(boxes)):
        if scores[i] > scores[top]:
            top = i
    top_box = list(boxes[top])

    eliminated = [i for i, b in enumerate(created) if not overlaps_ref(b, top_box)]
    survivors = [b for b in created if overlaps_ref(b, top_box)]
    if not survivors:
        return clusters, eliminated, True, top_box
    if size_weight_mode == "area":
        weights = [(b[2] - b[0]) * (b[3] - b[1]) for b in survivors]
    else:
        weights = [1.0] * len(survivors)
    wsum = sum(weights)
    merged = [
        sum(w * b[k] for w, b in zip(weights, survivors)) / wsum for k in range(4)
    ]
    final = [(merged[k] + top_box[k]) / 2.0 for k in range(4)]
    return clusters, eliminated, False, final


# ---------------------------------------------------------------------------
# transformer encoder forward (scalar-loop style)
# ---------------------------------------------------------------------------

def _ln_rows(x, g, b, eps=1e-5):
    out = []
    for row in x:
        d = len(row)
        mu = sum(row) / d
        var = sum((v - mu) ** 2 for v in row) / d
        inv = 1.0 / math.sqrt(var + eps)
        out.append([(row[j] - mu) * inv * g[j] + b[j] for j in range(d)])
    return out


def _matvecs(x, w, b):
    """x: N x D list-of-lists, w: D x M, b: M."""
    n, d, m = len(x), len(w), len(w[0])
    return [
        [sum(x[i][k] * w[k][j] for k in range(d)) + b[j] for j in range(m)]
        for i in range(n)
    ]


def _gelu_scalar(u):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * u * (1.0 + math.tanh(c * (u + 0.044715 * u**3)))


def encoder_reference(features, params, layers: int, heads: int):
    """Forward pass via per-head, per-row scalar loops; params is the package's
    parameter dict (read as plain nested lists)."""
    feat = [list(map(float, row)) for row in features]
    n = len(feat)
    d = len(feat[0])
    dh = d // heads
    pos = params["enc.pos"]
    x = [[feat[i][j] + float(pos[i][j]) for j in range(d)] for i in range(n)]

    for l in range(layers):
        p = f"enc.{l}."
        h = _ln_rows(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q_full = _matvecs(h, params[p + "attn.wq"].tolist(), params[p + "attn.bq"].tolist())
        k_full = _matvecs(h, params[p + "attn.wk"].tolist(), params[p + "attn.bk"].tolist())
        v_full = _matvecs(h, params[p + "attn.wv"].tolist(), params[p + "attn.bv"].tolist())
        merged = [[0.0] * d for _ in range(n)]
        for head in range(heads):
            lo, hi = head * dh, (head + 1) * dh
            for i in range(n):
                logits = []
                for j in range(n):
                    dot = sum(q_full[i][a] * k_full[j][a] for a in range(lo, hi))
                    logits.append(dot / math.sqrt(dh))
                peak = max(logits)
                exp = [math.exp(v - peak) for v in logits]
                z = sum(exp)
                attn = [v / z for v in exp]
                for a in range(lo, hi):
                    merged[i][a] = sum(attn[j] * v_full[j][a] for j in range(n))
        proj = _matvecs(merged, params[p + "attn.wo"].tolist(), params[p + "attn.bo"].tolist())
        x = [[x[i][j] + proj[i][j] for j in range(d)] for i in range(n)]

        h2 = _ln_rows(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = _matvecs(h2, params[p + "ffn.w1"].tolist(), params[p + "ffn.b1"].tolist())
        a_act = [[_gelu_scalar(v) for v in row] for row in u]
        f = _matvecs(a_act, params[p + "ffn.w2"].tolist(), params[p + "ffn.b2"].tolist())
        x = [[x[i][j] + f[i][j] for j in range(d)] for i in range(n)]
    return x


# ---------------------------------------------------------------------------
# 11-point average precision by exhaustive threshold sweep
# ---------------------------------------------------------------------------

def _match_at_threshold(dets, gt_by_image, iou_pos):
    """Greedy matching of all dets (already filtered) in descending score order.

    dets: list of (image_id, in_image_index, score, box4).
    gt_by_image: {image: [box4, ...]} (non-difficult boxes of the class only).
    Returns (tp, fp).
    """
    ordered = sorted(dets, key=lambda t: (-t[2], t[0], t[1]))
    used = {img: [False] * len(v) for img, v in gt_by_image.items()}
    tp = fp = 0
    for image_id, _idx, _score, box in ordered:
        candidates = gt_by_image.get(image_id, [])
        best_ov, best_j = 0.0, -1
        for j, g in enumerate(candidates):
            ov = iou_ref(box, g)
            if ov > best_ov:
                best_ov, best_j = ov, j
        if best_ov > iou_pos and not used[image_id][best_j]:
            used[image_id][best_j] = True
            tp += 1
        else:
            fp += 1
    return tp, fp


def ap_11point_reference(dets, gt_entries, class_id: int, iou_pos: float = 0.5):
    """dets: list of (image_id, in_image_index, score, box4, class_id);
    gt_entries: list of (image_id, class_id, box4, difficult).

    Sweeps every detection score as a threshold, recomputes matching from
    scratch below each threshold, and interpolates at the 11 canonical recall
    levels using exact rational recall comparisons. Returns None when the
    class has no countable ground truth.
    """
    gt_by_image: dict[str, list] = {}
    for image_id, cid, box, difficult in gt_entries:
        if cid == class_id and not difficult:
            gt_by_image.setdefault(image_id, []).append(box)
    npos = sum(len(v) for v in gt_by_image.values())
    if npos == 0:
        return None
    class_dets = [
        (image_id, idx, score, box)
        for image_id, idx, score, box, cid in dets
        if cid == class_id
    ]
    if not class_dets:
        return 0.0

    points = []  # (recall as Fraction, precision as float)
    for threshold in sorted({d[2] for d in class_dets}, reverse=True):
        subset = [d for d in class_dets if d[2] >= threshold]
        tp, fp = _match_at_threshold(subset, gt_by_image, iou_pos)
        points.append((Fraction(tp, npos), tp / (tp + fp) if tp + fp else 0.0))

    ap = 0.0
    for i in range(11):
        level = Fraction(i, 10)
        reachable = [p for r, p in points if r >= level]
        ap += max(reachable) if reachable else 0.0
    return ap / 11.0


# ---------------------------------------------------------------------------
# central finite differences
# ---------------------------------------------------------------------------

def fd_gradient(f, arr, h: float = 1e-5):
    """Central-difference gradient of scalar f w.r.t. every entry of arr (in place)."""
    import numpy as np

    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
