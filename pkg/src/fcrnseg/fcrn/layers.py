"""Layer kernels with hand-written backward passes.

Activations are kept channel-first as ``[C, N, H, W]`` so that the im2col
matrix product needs no transposes. Convolutions use zero "same" padding,
``pad = dilation * (kernel - 1) // 2``, so a stride-``s`` conv produces
``ceil(H / s)`` rows with output row ``i`` centred on input row ``i * s``.
"""
from __future__ import annotations

import numpy as np


def conv_out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def conv2d(x, w, stride=1, dilation=1, bias=None):
    """x: [C, N, H, W]; w: [O, C, k, k] -> ([O, N, Ho, Wo], cache)."""
    C, N, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C or k != k2:
        raise ValueError(f"conv weight {w.shape} does not match input {x.shape}")
    p = dilation * (k - 1) // 2
    Ho, Wo = conv_out_size(H, stride), conv_out_size(W, stride)
    if k == 1 and stride == 1:
        cols = x.reshape(C, -1)
        xp_shape = None
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            yi = i * dilation
            for j in range(k):
                xj = j * dilation
                cols[:, i, j] = xp[:, :, yi:yi + stride * (Ho - 1) + 1:stride,
                                   xj:xj + stride * (Wo - 1) + 1:stride]
        cols = cols.reshape(C * k * k, -1)
        xp_shape = xp.shape
    out = (w.reshape(O, -1) @ cols).reshape(O, N, Ho, Wo)
    if bias is not None:
        out += bias[:, None, None, None]
    return out, (cols, x.shape, xp_shape, stride, dilation, p)


def conv2d_backward(dout, w, cache):
    """Returns (dx, dw, dbias)."""
    cols, x_shape, xp_shape, stride, dilation, p = cache
    O, C, k, _ = w.shape
    _, N, Ho, Wo = dout.shape
    dflat = dout.reshape(O, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    db = dflat.sum(axis=1)
    dcols = w.reshape(O, -1).T @ dflat
    if xp_shape is None:
        return dcols.reshape(x_shape), dw, db
    dcols = dcols.reshape(C, k, k, N, Ho, Wo)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(k):
        yi = i * dilation
        for j in range(k):
            xj = j * dilation
            dxp[:, :, yi:yi + stride * (Ho - 1) + 1:stride,
                xj:xj + stride * (Wo - 1) + 1:stride] += dcols[:, i, j]
    H, W = x_shape[2], x_shape[3]
    return dxp[:, :, p:p + H, p:p + W], dw, db


def affine(x, scale, shift):
    return x * scale[:, None, None, None] + shift[:, None, None, None]


def affine_backward(dy, x, scale):
    dscale = np.einsum("cnhw,cnhw->c", dy, x)
    dshift = dy.sum(axis=(1, 2, 3))
    return dy * scale[:, None, None, None], dscale, dshift


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, y):
    return dy * (y > 0)


# -- resampling --------------------------------------------------------------

def upsample_matrix(out_len: int, in_len: int, stride: int, mode: str = "nearest", dtype=np.float64):
    """Linear map from a stride-``stride`` grid back to ``out_len`` pixels.

    Coarse cell ``i`` sits on pixel ``i * stride``, so pixels on that lattice
    copy the coarse value exactly in both modes.
    """
    u = np.arange(out_len) / stride
    U = np.zeros((out_len, in_len), dtype=dtype)
    rows = np.arange(out_len)
    if mode == "nearest":
        idx = np.clip(np.floor(u + 0.5).astype(int), 0, in_len - 1)
        U[rows, idx] = 1.0
    elif mode == "bilinear":
        i0 = np.clip(np.floor(u).astype(int), 0, in_len - 1)
        i1 = np.clip(i0 + 1, 0, in_len - 1)
        frac = np.clip(u - i0, 0.0, 1.0)
        frac = np.where(i1 == i0, 0.0, frac)
        np.add.at(U, (rows, i0), 1.0 - frac)
        np.add.at(U, (rows, i1), frac)
    else:
        raise ValueError(f"unknown upsampling mode {mode!r}")
    return U


def upsample(x, out_hw, stride, mode="nearest"):
    """Upsample the last two axes of ``x`` to ``out_hw``; returns (y, (Uh, Uw))."""
    h, w = x.shape[-2:]
    Uh = upsample_matrix(out_hw[0], h, stride, mode, x.dtype)
    Uw = upsample_matrix(out_hw[1], w, stride, mode, x.dtype)
    return np.einsum("Hh,...hw,Ww->...HW", Uh, x, Uw, optimize=True), (Uh, Uw)


def upsample_backward(dy, mats):
    Uh, Uw = mats
    return np.einsum("Hh,...HW,Ww->...hw", Uh, dy, Uw, optimize=True)
