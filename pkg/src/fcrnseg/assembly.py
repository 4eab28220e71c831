"""Instance assembly from semantic score maps and per-pixel box transforms.

Per foreground category: keep pixels where the category is among the top-n
scores, decode each pixel's predicted box, run greedy box NMS where each
surviving pixel is an instance hypothesis and its suppressed pixels form the
mask, then score hypotheses by their mean category score. A final mask-IoU
NMS removes duplicates within each category.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxcoding import decode_maps
from .fcrn.layers import upsample
from .tensor import iou_one_to_many, write_tensor


@dataclass
class PipelineConfig:
    top_n: int = 2
    box_nms_iou: float = 0.3
    region_nms_iou: float = 0.5
    min_cluster_pixels: int = 4
    max_instances_per_category: int = 100
    # candidate pixels need a category score above this floor
    min_score: float = 0.0
    # transform-map upsampling; None means nearest
    upsample: str | None = None

    def validate(self) -> None:
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        for name in ("box_nms_iou", "region_nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if not 0.0 <= self.min_score < 1.0:
            raise ValueError("min_score must lie in [0, 1)")
        if self.min_cluster_pixels < 1 or self.max_instances_per_category < 1:
            raise ValueError("min_cluster_pixels and max_instances_per_category must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class InstanceHypothesis:
    category: int
    box: tuple[float, float, float, float]
    confidence: float
    cluster: np.ndarray  # flat pixel indices, ascending
    shape: tuple[int, int] = field(default=(0, 0))

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape[0] * self.shape[1], dtype=bool)
        m[self.cluster] = True
        return m.reshape(self.shape)

    @property
    def area(self) -> int:
        return int(self.cluster.size)


@dataclass
class DecodedBoxes:
    pixels: np.ndarray  # flat pixel indices
    boxes: np.ndarray  # [P, 4]
    skipped: int = 0


def top_n_masks(probs: np.ndarray, n: int) -> np.ndarray:
    """Boolean ``[K+1, H, W]``; channel c is set where c ranks within the pixel's
    n highest scores (ties broken by channel index). Channel 0 stays empty."""
    K1 = probs.shape[0]
    n = min(n, K1)
    order = np.argsort(-probs, axis=0, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(K1)[:, None, None], axis=0)
    masks = rank < n
    masks[0] = False
    return masks


def decode_boxes(transform_map: np.ndarray, mask: np.ndarray, category: int, stride: int) -> DecodedBoxes:
    """Decode the category's 4 transform channels at every masked pixel,
    clipping to the image. Boxes left without area after clipping are skipped."""
    H, W = mask.shape
    pix = np.flatnonzero(mask)
    codes = transform_map[4 * (category - 1): 4 * category].reshape(4, -1)[:, pix].T
    boxes = decode_maps(codes, pix // W, pix % W, stride, (H, W), clip=True)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return DecodedBoxes(pix[ok], boxes[ok], int(np.count_nonzero(~ok)))


def box_nms_cluster(pixels: np.ndarray, boxes: np.ndarray, scores: np.ndarray, iou_thr: float):
    """Greedy NMS that remembers who suppressed whom.

    Candidates are visited by score descending, pixel index ascending. Returns
    ``(keepers, assignment)``: candidate indices of the surviving boxes in visit
    order, and for every candidate the index of the keeper owning it.
    """
    n = len(pixels)
    assignment = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return np.zeros(0, dtype=np.int64), assignment
    order = np.lexsort((pixels, -scores))
    remaining = order
    keepers = []
    while remaining.size:
        i = remaining[0]
        keepers.append(i)
        ious = iou_one_to_many(boxes[i], boxes[remaining])
        hit = ious > iou_thr
        hit[0] = True
        assignment[remaining[hit]] = i
        remaining = remaining[~hit]
    return np.asarray(keepers, dtype=np.int64), assignment


def recover_instances(pixels, boxes, keepers, assignment, category_scores: np.ndarray, category: int,
                      min_cluster_pixels: int = 1) -> list[InstanceHypothesis]:
    """Turn NMS clusters into hypotheses; ``category_scores`` is the [H, W] score map."""
    shape = category_scores.shape
    flat = category_scores.reshape(-1)
    out = []
    for k in keepers:
        cluster = np.sort(pixels[assignment == k])
        if cluster.size < min_cluster_pixels:
            continue
        conf = float(flat[cluster].mean())
        out.append(InstanceHypothesis(category, tuple(float(v) for v in boxes[k]), conf, cluster, shape))
    return out


def mask_iou(a: InstanceHypothesis, b: InstanceHypothesis) -> float:
    inter = np.intersect1d(a.cluster, b.cluster, assume_unique=True).size
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def region_nms(hypotheses: list[InstanceHypothesis], iou_thr: float,
               max_per_category: int | None = None) -> list[InstanceHypothesis]:
    """Greedy mask-IoU suppression within each category, by confidence descending
    (stable on input order). Output keeps that order per category, categories ascending."""
    out = []
    for cat in sorted({h.category for h in hypotheses}):
        hs = [h for h in hypotheses if h.category == cat]
        order = sorted(range(len(hs)), key=lambda i: -hs[i].confidence)
        kept: list[InstanceHypothesis] = []
        for i in order:
            if all(mask_iou(hs[i], k) <= iou_thr for k in kept):
                kept.append(hs[i])
        if max_per_category is not None:
            kept = kept[:max_per_category]
        out.extend(kept)
    return out


def align_transform(transform_map: np.ndarray, hw, stride: int, mode: str = "nearest") -> np.ndarray:
    if transform_map.shape[-2:] == tuple(hw):
        return transform_map
    up, _ = upsample(transform_map.astype(np.float64), hw, stride, mode)
    return up


def run_instance_pipeline(probs: np.ndarray, transform_map: np.ndarray, cfg: PipelineConfig,
                          stride: int) -> list[InstanceHypothesis]:
    """Score maps ``[K+1, H, W]`` + transform maps ``[4K, h, w]`` -> instances.

    A transform map smaller than the score map is taken to live on the
    stride-``stride`` grid and is upsampled with ``cfg.upsample``.
    """
    cfg.validate()
    K1, H, W = probs.shape
    if transform_map.shape[0] != 4 * (K1 - 1):
        raise ValueError(f"transform map has {transform_map.shape[0]} channels, "
                         f"expected {4 * (K1 - 1)} for {K1 - 1} categories")
    tmap = align_transform(transform_map, (H, W), stride, cfg.upsample or "nearest")
    masks = top_n_masks(probs, cfg.top_n)
    hyps = []
    for cat in range(1, K1):
        score = probs[cat]
        mask = masks[cat] & (score > cfg.min_score)
        if not mask.any():
            continue
        dec = decode_boxes(tmap, mask, cat, stride)
        scores = score.reshape(-1)[dec.pixels]
        keepers, assign = box_nms_cluster(dec.pixels, dec.boxes, scores, cfg.box_nms_iou)
        hyps += recover_instances(dec.pixels, dec.boxes, keepers, assign, score, cat,
                                  cfg.min_cluster_pixels)
    return region_nms(hyps, cfg.region_nms_iou, cfg.max_instances_per_category)


# -- output ----------------------------------------------------------------------

def write_hypotheses(path, hypotheses: list[InstanceHypothesis], mask_dir, prefix: str) -> dict:
    """Write ``path`` JSON plus one 0/1 mask tensor per hypothesis under ``mask_dir``.

    Mask paths in the JSON are relative to the JSON file's directory.
    """
    path = Path(path)
    mask_dir = Path(mask_dir)
    mask_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for i, h in enumerate(hypotheses):
        f = mask_dir / f"{prefix}_{i:03d}.fcrt"
        write_tensor(f, h.mask.astype(np.float32))
        items.append({"category": h.category, "confidence": h.confidence,
                      "box": [float(v) for v in h.box],
                      "mask_file": str(f.relative_to(path.parent))})
    doc = {"hypotheses": items}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return doc
