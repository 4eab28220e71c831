"""Bootstrapped pixel losses.

Both losses drop "easy" pixels inside the current mini-batch and always keep
at least ``min_kept`` of the hardest ones. Semantic pixels are ranked by
true-class probability, localization pixels by the IoU between the decoded
predicted box and the ground-truth box. The selection is treated as a
constant when differentiating.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .boxcoding import decode_maps
from .tensor import iou_pairwise

IGNORE_LABEL = 255


@dataclass
class BootstrapConfig:
    t0: float = 0.6
    min_kept: int = 512
    mode: str = "semantic"
    iou_threshold: float = 0.7
    enabled: bool = True

    def validate(self) -> None:
        if not 0.0 < self.t0 <= 1.0:
            raise ValueError(f"t0 must lie in (0, 1], got {self.t0}")
        if self.min_kept < 0:
            raise ValueError("min_kept must be >= 0")
        if self.mode not in ("semantic", "localization"):
            raise ValueError(f"unknown bootstrap mode {self.mode!r}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")

    @classmethod
    def disabled(cls, mode="semantic") -> "BootstrapConfig":
        """Keeps every labeled pixel: plain cross-entropy / plain smoothed l1."""
        return cls(t0=1.0, min_kept=0, mode=mode, enabled=False)

    def to_dict(self):
        return asdict(self)


@dataclass
class PixelSelection:
    kept: np.ndarray  # flat pixel indices, ascending
    threshold: float  # t_eff (semantic) or tau_eff (localization)
    weights: np.ndarray  # one weight per kept pixel
    num_candidates: int = 0

    @property
    def empty(self) -> bool:
        return self.kept.size == 0


def _select(values, candidates, threshold, min_kept, keep_all=False):
    """Keep candidates with value < threshold, plus the ``min_kept`` smallest.

    Hardest-first order is value ascending then pixel index ascending.
    """
    vals = values[candidates]
    if keep_all:
        mask = np.ones(candidates.size, dtype=bool)
        t_eff = threshold
    else:
        mask = vals < threshold
        t_eff = threshold
        m = min(min_kept, candidates.size)
        if m > 0:
            order = np.lexsort((candidates, vals))
            mask[order[:m]] = True
            t_eff = max(threshold, float(vals[order[m - 1]]))
    return candidates[mask], t_eff


def select_hard_semantic(probs: np.ndarray, labels: np.ndarray, cfg: BootstrapConfig) -> PixelSelection:
    """``probs``: [K', H, W] or [N, K', H, W]; ``labels`` matching without the channel axis."""
    p = probs if probs.ndim == 4 else probs[None]
    y = labels if labels.ndim == 3 else labels[None]
    if p.shape[0] != y.shape[0] or p.shape[2:] != y.shape[1:]:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} are not aligned")
    K = p.shape[1]
    y = y.reshape(-1)
    labeled = np.flatnonzero(y != IGNORE_LABEL)
    if np.any(y[labeled] >= K) or np.any(y[labeled] < 0):
        raise ValueError("label outside 0..K'-1")
    true_p = _true_class_probs(p, y)
    kept, t_eff = _select(true_p, labeled, cfg.t0, cfg.min_kept, keep_all=not cfg.enabled)
    return PixelSelection(kept, t_eff, np.ones(kept.size), labeled.size)


def _true_class_probs(p, y_flat):
    N, K, H, W = p.shape
    flat = p.transpose(0, 2, 3, 1).reshape(-1, K)
    out = np.full(y_flat.size, np.inf)
    ok = y_flat != IGNORE_LABEL
    out[ok] = flat[np.flatnonzero(ok), y_flat[ok]]
    return out


def bootstrapped_cross_entropy(probs: np.ndarray, labels: np.ndarray, selection: PixelSelection):
    """Mean of -log p_true over kept pixels; gradient is taken w.r.t. the logits."""
    p = probs if probs.ndim == 4 else probs[None]
    y = (labels if labels.ndim == 3 else labels[None]).reshape(-1)
    N, K, H, W = p.shape
    grad = np.zeros((N, H, W, K), dtype=p.dtype)
    if selection.empty:
        g = grad.transpose(0, 3, 1, 2)
        return 0.0, (g if probs.ndim == 4 else g[0])
    kept = selection.kept
    flat = p.transpose(0, 2, 3, 1).reshape(-1, K)
    pk = flat[kept]
    yk = y[kept]
    n = kept.size
    loss = -float(np.mean(np.log(np.maximum(pk[np.arange(n), yk], 1e-30))))
    gk = pk.astype(np.float64)
    gk[np.arange(n), yk] -= 1.0
    grad.reshape(-1, K)[kept] = gk / n
    g = grad.transpose(0, 3, 1, 2)
    return loss, (g if probs.ndim == 4 else g[0])


def instance_pixel_weights(instances: np.ndarray, records) -> np.ndarray:
    """1 / (box height * box width) on every pixel of each instance, 0 elsewhere."""
    lut = np.zeros(int(instances.max(initial=0)) + 1)
    for r in records:
        y0, x0, y1, x1 = r.box
        if r.id < lut.size:
            lut[r.id] = 1.0 / ((y1 - y0) * (x1 - x0))
    return lut[instances]


def smoothed_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smoothed_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


def _gather_category_channels(pred, cats):
    """pred [N, 4K, H, W], cats flat per-pixel category (>= 1) -> [P, 4] for those pixels."""
    N, C, H, W = pred.shape
    flat = pred.transpose(0, 2, 3, 1).reshape(-1, C)
    return flat, 4 * (cats[:, None] - 1) + np.arange(4)[None, :]


def select_hard_localization(pred_maps, targets, categories, weights, cfg: BootstrapConfig,
                             stride: int) -> PixelSelection:
    """Keep foreground pixels whose decoded box has IoU < tau with the target box.

    ``pred_maps``: [N, 4K, H, W] (or unbatched) full-resolution transform maps;
    ``targets``: [N, 4, H, W] encoded ground-truth boxes; ``categories``: [N, H, W]
    ground-truth category (0 = background, not regressed); ``weights``: per-pixel
    loss weights, see :func:`instance_pixel_weights`.
    """
    pred, tgt, cats, w = _batched(pred_maps, targets, categories, weights)
    N, C, H, W = pred.shape
    cats = cats.reshape(-1)
    fg = np.flatnonzero(cats > 0)
    if fg.size == 0:
        return PixelSelection(fg, cfg.iou_threshold, np.zeros(0), 0)
    ious = np.full(cats.size, np.inf)
    ious[fg] = foreground_ious(pred, tgt, cats, fg, stride, (H, W))
    kept, tau = _select(ious, fg, cfg.iou_threshold, cfg.min_kept, keep_all=not cfg.enabled)
    return PixelSelection(kept, tau, w.reshape(-1)[kept], fg.size)


def foreground_ious(pred, tgt, cats_flat, fg, stride, hw):
    N, C, H, W = pred.shape
    flat, cols = _gather_category_channels(pred, cats_flat[fg])
    p4 = np.take_along_axis(flat[fg], cols, axis=1)
    t4 = tgt.transpose(0, 2, 3, 1).reshape(-1, 4)[fg]
    pix = fg % (H * W)
    ys, xs = pix // W, pix % W
    pb = decode_maps(p4, ys, xs, stride, hw, clip=False)
    tb = decode_maps(t4, ys, xs, stride, hw, clip=False)
    return iou_pairwise(pb, tb)


def _batched(pred_maps, targets, categories, weights):
    if pred_maps.ndim == 3:
        return pred_maps[None], targets[None], categories[None], weights[None]
    return pred_maps, targets, categories, weights


def localization_loss(pred_maps, targets, categories, selection: PixelSelection):
    """Weighted smoothed-l1 over the 4 channels of each kept pixel's category,
    normalized by the total kept weight. Returns ``(loss, grad wrt pred_maps)``."""
    unbatched = pred_maps.ndim == 3
    pred, tgt, cats, _ = _batched(pred_maps, targets, categories, categories)
    N, C, H, W = pred.shape
    grad = np.zeros((N, H, W, C), dtype=pred.dtype)
    wsum = float(selection.weights.sum()) if not selection.empty else 0.0
    if selection.empty or wsum <= 0:
        g = grad.transpose(0, 3, 1, 2)
        return 0.0, (g[0] if unbatched else g)
    kept = selection.kept
    flat, cols = _gather_category_channels(pred, cats.reshape(-1)[kept])
    p4 = np.take_along_axis(flat[kept], cols, axis=1).astype(np.float64)
    t4 = tgt.transpose(0, 2, 3, 1).reshape(-1, 4)[kept]
    r = p4 - t4
    w = selection.weights[:, None]
    loss = float((w * smoothed_l1(r)).sum() / wsum)
    gk = (w * smoothed_l1_grad(r)) / wsum
    gflat = grad.reshape(-1, C)
    rows = np.repeat(kept, 4)
    np.add.at(gflat, (rows, cols.reshape(-1)), gk.reshape(-1))
    g = grad.transpose(0, 3, 1, 2)
    return loss, (g[0] if unbatched else g)
