"""Semantic segmentation metrics and region (mask-IoU) average precision."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

VOL_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


# -- semantic -------------------------------------------------------------------

def confusion_matrix(pred, gt, num_classes: int, ignore=None) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth differ in size")
    keep = np.ones(gt.shape, dtype=bool) if ignore is None else ~np.asarray(ignore, bool).reshape(-1)
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def metrics_from_confusion(cm: np.ndarray) -> dict:
    total = cm.sum()
    if total == 0:
        raise ValueError("no evaluated pixels (everything ignored)")
    tp = np.diag(cm).astype(np.float64)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    present = gt_count > 0
    acc = tp[present] / gt_count[present]
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    return {
        "pixel_acc": float(tp.sum() / total),
        "mean_acc": float(acc.mean()),
        "mean_iou": float(iou.mean()),
        "class_iou": {int(c): float(v) for c, v in zip(np.flatnonzero(present), iou)},
    }


def semantic_metrics(pred, gt, ignore=None, num_classes: int | None = None) -> dict:
    """Pixel accuracy, mean class accuracy and mean IoU; classes absent from the
    ground truth are left out of both means."""
    if num_classes is None:
        num_classes = int(max(np.max(pred), np.max(gt))) + 1
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes, ignore))


# -- instances --------------------------------------------------------------------

@dataclass
class PredInstance:
    image: int
    category: int
    confidence: float
    mask: np.ndarray


@dataclass
class GtInstance:
    image: int
    category: int
    mask: np.ndarray
    id: int = 0


@dataclass
class CategoryMatches:
    category: int
    num_gt: int
    confidences: list = field(default_factory=list)
    matched_gt: list = field(default_factory=list)  # gt index or None
    ious: list = field(default_factory=list)

    @property
    def tp(self) -> np.ndarray:
        return np.array([m is not None for m in self.matched_gt], dtype=bool)


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.count_nonzero(a & b)
    union = np.count_nonzero(a | b)
    return inter / union if union else 0.0


class _IoUCache:
    def __init__(self, preds, gts):
        self.preds, self.gts = preds, gts
        self._c = {}

    def __call__(self, i, j):
        key = (i, j)
        if key not in self._c:
            self._c[key] = _mask_iou(self.preds[i].mask, self.gts[j].mask)
        return self._c[key]


def match_instances(preds: list[PredInstance], gts: list[GtInstance], iou_threshold: float,
                    _iou=None) -> dict[int, CategoryMatches]:
    """Greedy matching per category.

    Predictions are visited by confidence descending (stable on input order).
    Each takes the still-unmatched same-category GT of its image with the highest
    mask IoU; it is a true positive iff that IoU >= ``iou_threshold``.
    """
    iou = _iou or _IoUCache(preds, gts)
    cats = sorted({g.category for g in gts} | {p.category for p in preds})
    gts_by = defaultdict(list)
    for j, g in enumerate(gts):
        gts_by[(g.image, g.category)].append(j)
    result = {}
    for c in cats:
        cm = CategoryMatches(c, sum(1 for g in gts if g.category == c))
        used = set()
        order = sorted((i for i, p in enumerate(preds) if p.category == c),
                       key=lambda i: -preds[i].confidence)
        for i in order:
            p = preds[i]
            best, best_iou = None, -1.0
            for j in gts_by.get((p.image, c), []):
                if j in used:
                    continue
                v = iou(i, j)
                if v > best_iou:
                    best, best_iou = j, v
            cm.confidences.append(p.confidence)
            if best is not None and best_iou >= iou_threshold:
                used.add(best)
                cm.matched_gt.append(best)
                cm.ious.append(best_iou)
            else:
                cm.matched_gt.append(None)
                cm.ious.append(max(best_iou, 0.0))
        result[c] = cm
    return result


def average_precision_from_outcomes(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if num_gt <= 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def average_precision(matches: CategoryMatches) -> float:
    return average_precision_from_outcomes(matches.tp, matches.num_gt)


def per_category_ap(preds, gts, thr, _iou=None) -> dict[int, float]:
    matches = match_instances(preds, gts, thr, _iou)
    return {c: average_precision(m) for c, m in matches.items() if m.num_gt > 0}


def map_r(preds, gts, thr: float, _iou=None) -> float:
    aps = per_category_ap(preds, gts, thr, _iou)
    if not aps:
        raise ValueError("no ground-truth instances")
    return float(np.mean(list(aps.values())))


def map_r_vol(preds, gts, thresholds=VOL_THRESHOLDS) -> float:
    iou = _IoUCache(preds, gts)
    return float(np.mean([map_r(preds, gts, t, iou) for t in thresholds]))


def instance_report(preds, gts, thresholds=(0.5, 0.7)) -> dict:
    iou = _IoUCache(preds, gts)
    report = {"num_predictions": len(preds), "num_gt": len(gts)}
    if not gts:
        return report
    for t in thresholds:
        aps = per_category_ap(preds, gts, t, iou)
        report[f"map_r@{t:g}"] = float(np.mean(list(aps.values())))
        report[f"ap@{t:g}"] = {str(c): v for c, v in sorted(aps.items())}
    report["map_r_vol"] = float(np.mean([map_r(preds, gts, t, iou) for t in VOL_THRESHOLDS]))
    return report


def format_report(report: dict) -> str:
    rows = []
    for k, v in report.items():
        if isinstance(v, dict):
            for c, x in v.items():
                rows.append((f"{k}[{c}]", f"{x:.4f}"))
        elif isinstance(v, float):
            rows.append((k, f"{v:.4f}"))
        else:
            rows.append((k, str(v)))
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k:<{width}}  {v:>10}" for k, v in rows)
