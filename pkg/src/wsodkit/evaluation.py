"""Detection metrics under the VOC protocol: per-class AP, mAP, CorLoc.

Matching is greedy in descending score order within each class; a detection
is a true positive when its IoU with an unmatched, non-difficult ground-truth
box of the class is strictly greater than the positive threshold (0.5 by
default), and each ground-truth box can absorb at most one detection.
Difficult boxes are excluded from both matching and the recall denominator.

AP summarizes the precision/recall curve either by 11-point interpolation
(VOC2007 style, the default) or by the area under the interpolated curve.
CorLoc is the fraction of class-positive images whose single best detection
for the class overlaps some ground-truth box of that class at IoU > 0.5;
a class with no positive images has no CorLoc (reported absent, never 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import GroundTruth
from .geometry import ScoredBox, iou

AP_MODES = ("voc07_11point", "area")


@dataclass(frozen=True)
class EvalReport:
    per_class_ap: dict[int, float | None]
    per_class_corloc: dict[int, float | None]
    mean_ap: float | None
    mean_corloc: float | None
    pr_curves: dict[int, tuple[tuple[float, ...], tuple[float, ...]]]


def _class_gt(gt: GroundTruth, class_id: int) -> dict[str, list]:
    """Non-difficult ground-truth boxes of one class, keyed by image."""
    out: dict[str, list] = {}
    for image_id, objs in gt.images.items():
        keep = [o.box for o in objs if o.class_id == class_id and not o.difficult]
        if keep:
            out[image_id] = keep
    return out


def precision_recall_curve(
    detections: Mapping[str, Sequence[ScoredBox]],
    gt: GroundTruth,
    class_id: int,
    iou_pos: float = 0.5,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Rank-by-rank (recall, precision) arrays plus the positive count.

    Detections are walked in descending score order (ties broken by image id,
    then in-image order) and matched greedily against the class's unmatched
    non-difficult boxes at IoU strictly above `iou_pos`.
    """
    for image_id in detections:
        if image_id not in gt.images:
            raise KeyError(f"detections reference unknown image id {image_id!r}")
    class_boxes = _class_gt(gt, class_id)
    npos = sum(len(v) for v in class_boxes.values())

    flat = [
        (image_id, i, det)
        for image_id in sorted(detections)
        for i, det in enumerate(detections[image_id])
        if det.class_id == class_id
    ]
    flat.sort(key=lambda t: (-t[2].score, t[0], t[1]))

    matched: dict[str, list[bool]] = {k: [False] * len(v) for k, v in class_boxes.items()}
    tp = np.zeros(len(flat))
    fp = np.zeros(len(flat))
    for rank, (image_id, _i, det) in enumerate(flat):
        candidates = class_boxes.get(image_id, [])
        best, best_j = 0.0, -1
        for j, box in enumerate(candidates):
            ov = iou(det.box, box)
            if ov > best:
                best, best_j = ov, j
        if best > iou_pos and not matched[image_id][best_j]:
            matched[image_id][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0

    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / npos if npos > 0 else np.zeros(len(flat))
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1.0)
    return recall, precision, npos


def average_precision(
    detections: Mapping[str, Sequence[ScoredBox]],
    gt: GroundTruth,
    class_id: int,
    iou_pos: float = 0.5,
    mode: str = "voc07_11point",
) -> float | None:
    """AP for one class; None when the class has no countable ground truth."""
    if mode not in AP_MODES:
        raise ValueError(f"mode must be one of {AP_MODES}, got {mode!r}")
    recall, precision, npos = precision_recall_curve(
        detections, gt, class_id, iou_pos=iou_pos
    )
    if npos == 0:
        return None
    if recall.size == 0:
        return 0.0
    if mode == "voc07_11point":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            # Tolerance absorbs float noise in recall == r comparisons; true
            # recall gaps are multiples of 1/npos, far above 1e-12.
            mask = recall >= r - 1e-12
            ap += float(precision[mask].max()) if mask.any() else 0.0
        return ap / 11.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


def corloc(
    top_dets: Mapping[str, Mapping[int, ScoredBox]],
    gt: GroundTruth,
    class_id: int,
    iou_pos: float = 0.5,
) -> float | None:
    """Fraction of class-positive images whose top box localizes the class.

    None when the class has no positive images (undefined, not zero).
    """
    class_boxes = _class_gt(gt, class_id)
    if not class_boxes:
        return None
    hits = 0
    for image_id, boxes in class_boxes.items():
        det = top_dets.get(image_id, {}).get(class_id)
        if det is None:
            continue
        if any(iou(det.box, b) > iou_pos for b in boxes):
            hits += 1
    return hits / len(class_boxes)


def _mean_defined(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def evaluate(
    detections: Mapping[str, Sequence[ScoredBox]],
    top_dets: Mapping[str, Mapping[int, ScoredBox]],
    gt: GroundTruth,
    class_ids: Sequence[int],
    iou_pos: float = 0.5,
    mode: str = "voc07_11point",
) -> EvalReport:
    per_ap: dict[int, float | None] = {}
    per_cl: dict[int, float | None] = {}
    curves: dict[int, tuple[tuple[float, ...], tuple[float, ...]]] = {}
    for c in class_ids:
        recall, precision, _npos = precision_recall_curve(detections, gt, c, iou_pos=iou_pos)
        per_ap[c] = average_precision(detections, gt, c, iou_pos=iou_pos, mode=mode)
        curves[c] = (
            tuple(float(r) for r in recall),
            tuple(float(p) for p in precision),
        )
        per_cl[c] = corloc(top_dets, gt, c, iou_pos=iou_pos)
    return EvalReport(
        per_class_ap=per_ap,
        per_class_corloc=per_cl,
        mean_ap=_mean_defined(list(per_ap.values())),
        mean_corloc=_mean_defined(list(per_cl.values())),
        pr_curves=curves,
    )


def report_to_dict(report: EvalReport) -> dict:
    return {
        "per_class_ap": {str(c): v for c, v in sorted(report.per_class_ap.items())},
        "per_class_corloc": {str(c): v for c, v in sorted(report.per_class_corloc.items())},
        "mean_ap": report.mean_ap,
        "mean_corloc": report.mean_corloc,
        "pr_curves": {
            str(c): {"recall": list(r), "precision": list(p)}
            for c, (r, p) in sorted(report.pr_curves.items())
        },
    }


def format_report(report: EvalReport, class_names: Mapping[int, str] | None = None) -> str:
    """Aligned-column text table of per-class and mean metrics."""
    def fmt(v: float | None) -> str:
        return "   --" if v is None else f"{v:0.4f}"

    rows = []
    for c in sorted(report.per_class_ap):
        name = class_names.get(c, str(c)) if class_names else str(c)
        rows.append((name, fmt(report.per_class_ap[c]), fmt(report.per_class_corloc.get(c))))
    width = max([len("class")] + [len(r[0]) for r in rows])
    lines = [f"{'class':<{width}}  {'AP':>7}  {'CorLoc':>7}"]
    for name, ap, cl in rows:
        lines.append(f"{name:<{width}}  {ap:>7}  {cl:>7}")
    lines.append(f"{'mean':<{width}}  {fmt(report.mean_ap):>7}  {fmt(report.mean_corloc):>7}")
    return "\n".join(lines)
