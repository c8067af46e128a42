"""Box arithmetic, NMS, detection/ground-truth matching and AP evaluation.

All functions are pure and deterministic; ties are broken by
(score desc, x1 asc, y1 asc, class asc) wherever ordering matters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# IoU thresholds for the COCO-style AP mean: 0.50:0.05:0.95
AP_IOU_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    score: float = 1.0

    def area(self) -> float:
        return max(0.0, self.x2 - self.x1) * max(0.0, self.y2 - self.y1)


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)          # (det index, gt index)
    unmatched_dets: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        inter = 0.0
    else:
        inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _det_order(boxes):
    """Deterministic processing order: score desc, then x1, y1, class."""
    return sorted(range(len(boxes)),
                  key=lambda i: (-boxes[i].score, boxes[i].x1, boxes[i].y1,
                                 boxes[i].class_id))


def nms(dets: list, sigma_nms: float) -> list:
    """Class-wise greedy suppression.

    A later box of the same class is removed when its IoU with an already
    kept box exceeds sigma_nms (strictly).  Output is sorted by descending
    score with the same deterministic tie-break as the iteration order.
    """
    if not 0.0 <= sigma_nms <= 1.0:
        raise ValueError(f"sigma_nms must be in [0,1], got {sigma_nms}")
    kept = []
    for i in _det_order(dets):
        cand = dets[i]
        suppressed = False
        for k in kept:
            if k.class_id == cand.class_id and iou(k, cand) > sigma_nms:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept


def match_detections(dets: list, gts: list, iou_thr: float = 0.5) -> MatchResult:
    """Greedy score-descending one-to-one matching within each class.

    Each detection grabs the highest-IoU still-unmatched gt of its class,
    provided IoU >= iou_thr.  Equal-IoU ties go to the lowest gt index.
    """
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must be in (0,1], got {iou_thr}")
    res = MatchResult()
    gt_taken = [False] * len(gts)
    for di in _det_order(dets):
        det = dets[di]
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if gt_taken[j] or gt.class_id != det.class_id:
                continue
            v = iou(det, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_thr:
            gt_taken[best_j] = True
            res.pairs.append((di, best_j))
        else:
            res.unmatched_dets.append(di)
    res.unmatched_gts = [j for j, t in enumerate(gt_taken) if not t]
    return res


def count_fp_fn(dets: list, gts: list, score_thr: float,
                iou_thr: float = 0.5) -> tuple:
    """FP/FN counts after dropping detections scoring below score_thr."""
    kept = [d for d in dets if d.score >= score_thr]
    m = match_detections(kept, gts, iou_thr)
    return len(m.unmatched_dets), len(m.unmatched_gts)


def _interp_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated AP from a cumulative PR sweep."""
    if recalls.size == 0:
        return 0.0
    # precision envelope: running max from the right
    prec = np.maximum.accumulate(precisions[::-1])[::-1]
    idx = np.searchsorted(recalls, RECALL_GRID, side="left")
    sampled = np.where(idx < recalls.size, prec[np.minimum(idx, recalls.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets_by_image: list, gts_by_image: list,
                      iou_thresholds=AP_IOU_THRESHOLDS) -> dict:
    """COCO-style AP over per-image detection/gt lists.

    Per class: global score-sorted greedy matching per IoU threshold,
    101-point interpolated AP, then the mean over classes (classes with
    no gt are excluded).  AP is the mean over iou_thresholds, AP50/AP75
    the values at 0.50 / 0.75.
    """
    if len(dets_by_image) != len(gts_by_image):
        raise ValueError("dets_by_image and gts_by_image must have equal length")
    classes = sorted({g.class_id for gts in gts_by_image for g in gts})
    if not classes:
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}

    ap_per_thr = {t: [] for t in iou_thresholds}
    for c in classes:
        n_gt = sum(1 for gts in gts_by_image for g in gts if g.class_id == c)
        records = []  # (det, image index)
        for img, dets in enumerate(dets_by_image):
            records.extend((d, img) for d in dets if d.class_id == c)
        records.sort(key=lambda r: (-r[0].score, r[1], r[0].x1, r[0].y1))
        for t in iou_thresholds:
            taken = [[False] * len(gts_by_image[i]) for i in range(len(gts_by_image))]
            tp = np.zeros(len(records))
            for ri, (det, img) in enumerate(records):
                best_j, best_iou = -1, 0.0
                for j, gt in enumerate(gts_by_image[img]):
                    if taken[img][j] or gt.class_id != c:
                        continue
                    v = iou(det, gt)
                    if v > best_iou:
                        best_j, best_iou = j, v
                if best_j >= 0 and best_iou >= t:
                    taken[img][best_j] = True
                    tp[ri] = 1.0
            tp_cum = np.cumsum(tp)
            fp_cum = np.cumsum(1.0 - tp)
            recalls = tp_cum / max(1, n_gt)
            precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
            ap_per_thr[t].append(_interp_ap(recalls, precisions))

    per_thr_mean = {t: float(np.mean(v)) for t, v in ap_per_thr.items()}
    return {
        "AP": float(np.mean(list(per_thr_mean.values()))),
        "AP50": per_thr_mean[iou_thresholds[0]],
        "AP75": per_thr_mean[iou_thresholds[5]],
    }
