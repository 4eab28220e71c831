"""Per-pixel box regression targets.

A foreground pixel at row ``y``, column ``x`` (centre ``(y + .5, x + .5)``)
inside an instance with box ``(y0, x0, y1, x1)`` regresses

    dy = (cy - (y + .5)) / stride,  dx = (cx - (x + .5)) / stride,
    log h,  log w

where ``(cy, cx)`` is the box centre and ``h, w`` its extents in pixels.
"""
from __future__ import annotations

import numpy as np


def encode_targets(instances: np.ndarray, records, stride: int):
    """Return ``(targets [4, H, W], categories [H, W])`` for one instance map.

    Background pixels get zero targets and category 0.
    """
    H, W = instances.shape
    n = int(instances.max(initial=0)) + 1
    lut = np.zeros((n, 5))  # cy, cx, log h, log w, category
    for r in records:
        if r.id >= n:
            continue
        y0, x0, y1, x1 = r.box
        lut[r.id] = (0.5 * (y0 + y1), 0.5 * (x0 + x1), np.log(y1 - y0), np.log(x1 - x0), r.category)
    vals = lut[instances]
    fg = instances > 0
    yy, xx = np.mgrid[0:H, 0:W]
    t = np.zeros((4, H, W))
    t[0] = np.where(fg, (vals[..., 0] - (yy + 0.5)) / stride, 0.0)
    t[1] = np.where(fg, (vals[..., 1] - (xx + 0.5)) / stride, 0.0)
    t[2] = np.where(fg, vals[..., 2], 0.0)
    t[3] = np.where(fg, vals[..., 3], 0.0)
    return t, vals[..., 4].astype(np.int64)


def decode_maps(codes: np.ndarray, ys: np.ndarray, xs: np.ndarray, stride: int, hw, clip=True):
    """Decode ``(P, 4)`` codes at pixels ``(ys, xs)`` into ``(P, 4)`` boxes."""
    codes = np.asarray(codes, dtype=np.float64)
    cy = ys + 0.5 + codes[:, 0] * stride
    cx = xs + 0.5 + codes[:, 1] * stride
    # keep exp finite for wildly wrong early predictions
    h = np.exp(np.clip(codes[:, 2], -20.0, 20.0))
    w = np.exp(np.clip(codes[:, 3], -20.0, 20.0))
    boxes = np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=1)
    if clip:
        H, W = hw
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, H)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, W)
    return boxes
