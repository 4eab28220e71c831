"""Dense array helpers, boxes, and the binary tensor file format.

Maps are plain numpy arrays in channel-major ``[K, H, W]`` layout. Anything
that touches disk goes through :func:`write_tensor` / :func:`read_tensor`,
which store little-endian float32 with a small fixed header.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FCRT"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 4


class TensorFormatError(ValueError):
    """Raised for malformed tensor files; ``code`` identifies the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class NonFiniteError(ValueError):
    pass


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis -3 of a ``[K, H, W]`` (or ``[N, K, H, W]``) array."""
    if logits.ndim not in (3, 4):
        raise ValueError(f"expected rank 3 or 4 logits, got shape {logits.shape}")
    check_finite(logits, "logits")
    shifted = logits - logits.max(axis=-3, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-3, keepdims=True)


def argmax_channels(scores: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=-3)


def category_slice(maps: np.ndarray, category: int, width: int = 4) -> np.ndarray:
    """Channels ``[width*(c-1), width*c)`` of a per-foreground-category map."""
    if category < 1:
        raise ValueError("categories are 1-based; 0 is background")
    return maps[..., width * (category - 1): width * category, :, :]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates (pixel i spans [i, i+1))."""

    y_min: float
    x_min: float
    y_max: float
    x_max: float

    def __post_init__(self):
        if not (self.y_max > self.y_min and self.x_max > self.x_min):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def area(self) -> float:
        return self.height * self.width

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.y_min + self.y_max), 0.5 * (self.x_min + self.x_max)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.y_min, self.x_min, self.y_max, self.x_max)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))


def box_iou(a: Box, b: Box) -> float:
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    if a == b:
        return 1.0
    return inter / (a.area + b.area - inter)


def iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """IoU of one ``(4,)`` box against ``(M, 4)`` boxes, rows as (y0, x0, y1, x1)."""
    ih = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    iw = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.clip(ih, 0, None) * np.clip(iw, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area + areas - inter)


def iou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two ``(M, 4)`` box arrays."""
    ih = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    iw = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    inter = np.clip(ih, 0, None) * np.clip(iw, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


# -- file format -----------------------------------------------------------

_HEADER = struct.Struct("<4sBBB")


def encode_tensor(t: np.ndarray) -> bytes:
    arr = np.asarray(t)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise TensorFormatError("bad_rank", f"rank {arr.ndim} not in 1..{MAX_RANK}")
    if arr.size == 0:
        raise TensorFormatError("bad_extent", f"zero extent in shape {arr.shape}")
    data = arr.astype("<f4", copy=False)
    if not np.all(np.isfinite(data)):
        raise TensorFormatError("non_finite", "non-finite value in tensor")
    head = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(data).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError("truncated", "truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise TensorFormatError("bad_magic", f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError("bad_version", f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise TensorFormatError("bad_dtype", f"unsupported dtype code {dtype}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError("bad_rank", f"rank {rank} not in 1..{MAX_RANK}")
    off = _HEADER.size
    if len(buf) < off + 4 * rank:
        raise TensorFormatError("truncated", "truncated extents")
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    if any(d < 1 for d in dims):
        raise TensorFormatError("bad_extent", f"zero extent in {dims}")
    off += 4 * rank
    n = int(np.prod(dims))
    payload = len(buf) - off
    if payload < 4 * n:
        raise TensorFormatError(
            "truncated", f"truncated payload: header declares {n} elements, {payload // 4} stored")
    if payload > 4 * n:
        raise TensorFormatError("trailing_bytes", f"{payload - 4 * n} trailing bytes")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError("non_finite", "non-finite value in payload")
    return arr.astype(np.float32)


def write_tensor(path, t: np.ndarray) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode_tensor(t))
    except OSError as e:
        raise OSError(f"cannot write tensor {path}: {e}") from e


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
