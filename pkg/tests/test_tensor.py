import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from fcrnseg.tensor import (Box, NonFiniteError, TensorFormatError, box_iou, decode_tensor,
                            encode_tensor, read_tensor, softmax_channels, write_tensor)


def test_softmax_uniform_on_zero_logits():
    p = softmax_channels(np.zeros((4, 3, 5)))
    np.testing.assert_allclose(p, 0.25)


def test_softmax_two_channel_value():
    logits = np.zeros((2, 1, 1))
    logits[1] = math.log(3.0)
    np.testing.assert_allclose(softmax_channels(logits)[:, 0, 0], [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4, 4))
    y = x.copy()
    y[:, 2, 3] += 17.0
    np.testing.assert_allclose(softmax_channels(x), softmax_channels(y), atol=1e-12)


def test_softmax_rejects_non_finite():
    x = np.zeros((3, 2, 2))
    x[1, 0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        softmax_channels(x)


@given(arrays(np.float64, array_shapes(min_dims=3, max_dims=3, max_side=6),
              elements=st.floats(-30, 30)))
def test_softmax_normalized_and_order_preserving(x):
    p = softmax_channels(x)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    # strict order between channels survives
    i, j = np.triu_indices(x.shape[0], 1)
    strict = x[i] > x[j] + 1e-9
    assert np.all(p[i][strict] >= p[j][strict])
    assert np.array_equal(np.argmax(p, axis=0), np.argmax(x, axis=0)) or np.any(
        np.sort(x, axis=0)[-1] - np.sort(x, axis=0)[-2] < 1e-9)


def test_box_iou_examples():
    a = Box(0, 0, 2, 2)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, Box(4, 4, 6, 6)) == 0.0
    assert box_iou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 2)


def _raster_iou(a, b):
    grid_a = np.zeros((64, 64), bool)
    grid_b = np.zeros((64, 64), bool)
    grid_a[a[0]:a[2], a[1]:a[3]] = True
    grid_b[b[0]:b[2], b[1]:b[3]] = True
    return np.count_nonzero(grid_a & grid_b) / np.count_nonzero(grid_a | grid_b)


int_boxes = st.tuples(st.integers(0, 31), st.integers(0, 31), st.integers(1, 32), st.integers(1, 32)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(int_boxes, int_boxes)
def test_box_iou_matches_rasterization(a, b):
    ba, bb = Box(*a), Box(*b)
    assert box_iou(ba, bb) == pytest.approx(_raster_iou(a, b), abs=1e-12)
    assert box_iou(ba, bb) == box_iou(bb, ba)
    assert box_iou(ba, ba) == 1.0


def test_roundtrip_2x3(tmp_path):
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(tmp_path / "t.fcrt", t)
    raw = (tmp_path / "t.fcrt").read_bytes()
    assert raw[:4] == b"FCRT" and raw[4:7] == bytes([1, 1, 2])
    assert struct.unpack("<2I", raw[7:15]) == (2, 3)
    back = read_tensor(tmp_path / "t.fcrt")
    assert back.tobytes() == t.tobytes()
    assert encode_tensor(back) == raw


def test_bad_magic():
    buf = bytearray(encode_tensor(np.ones(3)))
    buf[:4] = b"XXXX"
    with pytest.raises(TensorFormatError, match="bad magic") as e:
        decode_tensor(bytes(buf))
    assert e.value.code == "bad_magic"


def test_truncated_payload():
    buf = encode_tensor(np.ones(10))
    with pytest.raises(TensorFormatError, match="truncated") as e:
        decode_tensor(buf[:-4])
    assert e.value.code == "truncated"


@pytest.mark.parametrize("mutate,code", [
    (lambda b: b[:4] + bytes([2]) + b[5:], "bad_version"),
    (lambda b: b[:5] + bytes([7]) + b[6:], "bad_dtype"),
    (lambda b: b[:6] + bytes([5]) + b[7:], "bad_rank"),
    (lambda b: b + b"\0", "trailing_bytes"),
    (lambda b: b[:-4] + struct.pack("<f", float("inf")), "non_finite"),
])
def test_distinct_error_codes(mutate, code):
    with pytest.raises(TensorFormatError) as e:
        decode_tensor(mutate(encode_tensor(np.ones(3))))
    assert e.value.code == code


def test_write_rejects_rank5_and_nan():
    with pytest.raises(TensorFormatError):
        encode_tensor(np.ones((1, 1, 1, 1, 1)))
    with pytest.raises(TensorFormatError):
        encode_tensor(np.array([1.0, np.nan]))


@settings(max_examples=60)
@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(t):
    back = decode_tensor(encode_tensor(t))
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()
