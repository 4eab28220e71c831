import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcrnseg.fcrn import (ConvSpec, NetworkConfig, StageSpec, backward, compute_fov, forward,
                          init_params, load_checkpoint, rebase_strides, save_checkpoint, sgd_step)
from fcrnseg.fcrn import layers as L
from fcrnseg.fcrn.fov import REFERENCE_ROWS, distinct_settings, fov_table
from fcrnseg.fcrn.network import ParamStore
from fcrnseg.tensor import NonFiniteError

from oracles import finite_difference_check, naive_conv, relative_errors


# -- field of view -------------------------------------------------------------

@pytest.mark.parametrize("stride,k,d,fov", [(8, 5, 12, 392), (16, 3, 6, 208), (8, 1, 12, 8), (8, 7, 12, 584)])
def test_compute_fov_examples(stride, k, d, fov):
    assert compute_fov(stride, k, d) == fov


def test_fov_reference_rows_all_match():
    computed, bad = fov_table()
    assert bad == []
    assert len(computed) == len(REFERENCE_ROWS) == 37
    assert len(distinct_settings()) == 9


# -- stride rebasing -----------------------------------------------------------

def _net(stem_stride, strides, target, **kw):
    return NetworkConfig(stem=ConvSpec(3, stem_stride, 4),
                         stages=[StageSpec(1, 4, s) for s in strides],
                         target_output_stride=target, **kw)


def test_rebase_resnet_like_to_8():
    stem, sched = rebase_strides(_net(2, [2, 2, 2, 2], 8))
    assert stem == 2
    assert [s.stride for s in sched] == [2, 2, 1, 1]
    assert [s.dilation for s in sched] == [1, 1, 2, 4]
    assert [s.entry_dilation for s in sched] == [1, 1, 1, 2]


def test_rebase_identity_when_target_is_nominal():
    stem, sched = rebase_strides(_net(2, [2, 2, 2, 2], 32))
    assert [s.stride for s in sched] == [2, 2, 2, 2]
    assert all(s.dilation == 1 and s.entry_dilation == 1 for s in sched)


@pytest.mark.parametrize("target", [3, 64])
def test_rebase_rejects_non_divisor(target):
    with pytest.raises(ValueError):
        rebase_strides(_net(2, [2, 2, 2, 2], target))


@pytest.mark.parametrize("hw", [(64, 64), (61, 50)])
def test_output_dims_are_ceil(hw):
    cfg = _net(2, [2, 2, 2], 8, classifier_dilation=1)
    out, _ = forward(init_params(cfg, dtype=np.float64), cfg, np.zeros((3,) + hw))
    assert out.shape[1:] == (-(-hw[0] // 8), -(-hw[1] // 8))


def _shared_pair(stem_stride, strides, d16, seed, blocks=1):
    kw = dict(num_categories=2, classifier_kernel=3)
    stages = [StageSpec(blocks, 4 + i, s) for i, s in enumerate(strides)]
    c16 = NetworkConfig(stem=ConvSpec(3, stem_stride, 4), stages=stages, target_output_stride=16,
                        classifier_dilation=d16, **kw)
    c8 = NetworkConfig(stem=ConvSpec(3, stem_stride, 4), stages=stages, target_output_stride=8,
                       classifier_dilation=2 * d16, **kw)
    p = init_params(c16, seed=seed, dtype=np.float64, zero_init_residual=False)
    return c16, c8, p


def test_hole_algorithm_two_layer_net():
    c16, c8, p = _shared_pair(8, [2], 1, seed=0)
    x = np.random.default_rng(1).random((3, 80, 72))
    o16, _ = forward(p, c16, x)
    o8, _ = forward(p, c8, x)
    assert np.max(np.abs(o8[:, ::2, ::2] - o16)) <= 1e-5


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 1000), d16=st.integers(1, 2), blocks=st.integers(1, 2),
       h=st.integers(48, 72), w=st.integers(48, 72))
def test_hole_algorithm_random_nets(seed, d16, blocks, h, w):
    c16, c8, p = _shared_pair(2, [2, 2, 2], d16, seed, blocks)
    x = np.random.default_rng(seed).random((3, h, w))
    o16, _ = forward(p, c16, x)
    o8, _ = forward(p, c8, x)
    assert np.max(np.abs(o8[:, ::2, ::2] - o16)) <= 1e-5


# -- forward ---------------------------------------------------------------------

def test_conv_matches_hand_arithmetic():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    w = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64).reshape(1, 1, 3, 3)
    out, _ = L.conv2d(x, w)
    # interior of a linear ramp has zero Laplacian
    assert np.all(out[0, 0, 1:-1, 1:-1] == 0)
    # corner (0, 0): right + down - 4 * centre = 1 + 5 - 0
    assert out[0, 0, 0, 0] == 6
    # edge (0, 2): 1 + 3 + 7 - 4 * 2
    assert out[0, 0, 0, 2] == 3
    np.testing.assert_array_equal(out[:, 0], naive_conv(x[:, 0], w))


@pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (2, 3)])
def test_conv_matches_loop_oracle(stride, dilation):
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.normal(size=(3, 9, 8))
    w = rng.normal(size=(2, 3, 3, 3))
    out, _ = L.conv2d(x[:, None], w, stride, dilation)
    np.testing.assert_allclose(out[:, 0], naive_conv(x, w, stride, dilation), atol=1e-12)


def test_dilated_conv_equals_inflated_kernel():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 2, 11, 13))
    w = rng.normal(size=(3, 4, 3, 3))
    inflated = np.zeros((3, 4, 5, 5))
    inflated[:, :, ::2, ::2] = w
    a, _ = L.conv2d(x, w, 1, 2)
    b, _ = L.conv2d(x, inflated, 1, 1)
    assert np.max(np.abs(a - b)) <= 1e-6


def _identity_net():
    cfg = NetworkConfig(num_categories=2, stem=ConvSpec(3, 2, 3), stages=[StageSpec(1, 3, 2)],
                        target_output_stride=4, classifier_kernel=1, classifier_dilation=1)
    p = init_params(cfg, dtype=np.float64)
    eye = np.zeros((3, 3, 3, 3))
    eye[np.arange(3), np.arange(3), 1, 1] = 1.0
    p["stem.conv.w"][...] = eye
    p["stage0.block0.proj.w"][...] = np.eye(3)[:, :, None, None]
    p["classifier.w"][...] = np.eye(3)[:, :, None, None]
    return cfg, p


def test_identity_initialized_net_on_constant_image():
    cfg, p = _identity_net()
    out, _ = forward(p, cfg, np.full((3, 20, 24), 0.3))
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_zero_residual_branch_is_identity():
    cfg = NetworkConfig(stem=ConvSpec(3, 1, 5), stages=[StageSpec(1, 5, 1)],
                        target_output_stride=1, classifier_kernel=1, classifier_dilation=1)
    p = init_params(cfg, seed=4, dtype=np.float64, zero_init_residual=True)
    x = np.abs(np.random.default_rng(0).normal(size=(5, 2, 7, 6)))
    w1, w2 = p["stage0.block0.conv1.w"], p["stage0.block0.conv2.w"]
    r, _ = L.conv2d(x, w1)
    r = L.relu(L.affine(r, p["stage0.block0.aff1.scale"], p["stage0.block0.aff1.shift"]))
    r, _ = L.conv2d(r, w2)
    r = L.affine(r, p["stage0.block0.aff2.scale"], p["stage0.block0.aff2.shift"])
    np.testing.assert_array_equal(L.relu(r + x), x)


def test_output_channels_per_head():
    for head, c in [("semantic", 4), ("localization", 12)]:
        cfg = NetworkConfig(num_categories=3, head=head)
        out, _ = forward(init_params(cfg), cfg, np.zeros((3, 32, 32), np.float32))
        assert out.shape == (c, 4, 4)


def test_forward_deterministic():
    cfg = NetworkConfig()
    p = init_params(cfg, seed=2)
    x = np.random.default_rng(0).random((2, 3, 40, 40)).astype(np.float32)
    assert forward(p, cfg, x)[0].tobytes() == forward(p, cfg, x)[0].tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_names_layer():
    cfg = NetworkConfig()
    p = init_params(cfg)
    p["stem.conv.w"][0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError, match="stem.conv"):
        forward(p, cfg, np.ones((3, 32, 32), np.float32))


def test_input_smaller_than_fov_guard():
    cfg = NetworkConfig(classifier_kernel=5, classifier_dilation=12)
    with pytest.raises(ValueError, match="FoV"):
        forward(init_params(cfg), cfg, np.zeros((3, 64, 64), np.float32))


# -- backward ----------------------------------------------------------------------

def _tiny(head="semantic", multilayer=False):
    cfg = NetworkConfig(num_categories=2, head=head, stem=ConvSpec(3, 2, 3),
                        stages=[StageSpec(1, 3, 2), StageSpec(1, 4, 2)], target_output_stride=4,
                        classifier_kernel=3, classifier_dilation=2, multilayer_head=multilayer,
                        head_hidden=3)
    p = init_params(cfg, seed=5, dtype=np.float64, zero_init_residual=False)
    # zero biases put all-zero inputs exactly on a ReLU kink; move off it
    rng = np.random.default_rng(6)
    for name in p:
        if name.endswith((".b", ".shift")):
            p[name][...] = rng.normal(scale=0.1, size=p[name].shape)
    return cfg, p


def test_zero_upstream_gives_zero_grads():
    cfg, p = _tiny()
    x = np.random.default_rng(0).random((3, 16, 16))
    out, cache = forward(p, cfg, x)
    dx = backward(p, cache, np.zeros_like(out))
    assert not dx.any()
    assert all(not g.any() for g in p.grads.values())


def test_backward_shape_mismatch():
    cfg, p = _tiny()
    out, cache = forward(p, cfg, np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        backward(p, cache, np.zeros((out.shape[0] + 1,) + out.shape[1:]))


@pytest.mark.parametrize("head,multilayer", [("semantic", False), ("localization", True)])
def test_two_stage_net_finite_differences(head, multilayer):
    cfg, p = _tiny(head, multilayer)
    rng = np.random.default_rng(1)
    x = rng.random((2, 3, 16, 20))
    out, cache = forward(p, cfg, x)
    G = rng.normal(size=out.shape)
    backward(p, cache, G)
    rows = finite_difference_check(p, lambda: float(np.sum(forward(p, cfg, x)[0] * G)), 4, rng)
    assert np.max(relative_errors(rows)) <= 1e-3


def test_gradient_additive_over_crops():
    cfg, p = _tiny()
    rng = np.random.default_rng(2)
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    out, cache = forward(p, cfg, np.stack([a, b]))
    G = rng.normal(size=out.shape)
    backward(p, cache, G)
    joint = {k: v.copy() for k, v in p.grads.items()}
    p.zero_grad()
    for img, g in [(a, G[0]), (b, G[1])]:
        _, c = forward(p, cfg, img)
        backward(p, c, g, accumulate=True)
    for k in joint:
        np.testing.assert_allclose(p.grads[k], joint[k], rtol=1e-10, atol=1e-12)


# -- optimizer ------------------------------------------------------------------------

def test_sgd_lr_zero_leaves_params():
    cfg, p = _tiny()
    before = {k: v.copy() for k, v in p.params.items()}
    for g in p.grads.values():
        g[...] = 1.0
    for _ in range(3):
        sgd_step(p, 0.0, 0.9, 1e-3)
    assert all(np.array_equal(before[k], p[k]) for k in before)


def test_sgd_plain_step():
    p = ParamStore({"x.w": np.array([2.0])})
    p.grads["x.w"][...] = 0.5
    sgd_step(p, 0.1, momentum=0.0, weight_decay=0.0)
    assert p["x.w"][0] == pytest.approx(2.0 - 0.1 * 0.5)


def test_sgd_converges_on_quadratic():
    # loss = (x - 3)^2, minimum at 3
    p = ParamStore({"x.w": np.array([-4.0])})
    for _ in range(100):
        p.grads["x.w"][...] = 2 * (p["x.w"] - 3.0)
        sgd_step(p, 0.1, momentum=0.0)
    assert p["x.w"][0] == pytest.approx(3.0, abs=1e-6)


def test_sgd_momentum_persists():
    p = ParamStore({"x.w": np.array([0.0])})
    p.grads["x.w"][...] = 1.0
    sgd_step(p, 1.0, momentum=0.5)
    sgd_step(p, 1.0, momentum=0.5)
    # v1 = 1, v2 = 1.5
    assert p["x.w"][0] == pytest.approx(-2.5)


def test_sgd_non_finite_aborts():
    p = ParamStore({"x.w": np.array([0.0])})
    p.grads["x.w"][...] = np.inf
    with pytest.raises(NonFiniteError):
        sgd_step(p, 1.0)


# -- resampling and checkpoints ------------------------------------------------------------

@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_upsample_stride_aligned_pixels(mode):
    x = np.random.default_rng(0).normal(size=(2, 5, 4))
    y, mats = L.upsample(x, (37, 29), 8, mode)
    np.testing.assert_allclose(y[:, ::8, ::8], x, atol=1e-12)
    g = np.random.default_rng(1).normal(size=y.shape)
    # adjoint identity <U x, g> == <x, U^T g>
    assert np.sum(y * g) == pytest.approx(np.sum(x * L.upsample_backward(g, mats)))


def test_checkpoint_roundtrip(tmp_path):
    cfg = NetworkConfig(head="localization", multilayer_head=True)
    p = init_params(cfg, seed=3)
    save_checkpoint(tmp_path / "ck", p, cfg)
    q, cfg2, _ = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg
    assert all(np.array_equal(p[k], q[k]) for k in p)


def test_checkpoint_config_mismatch(tmp_path):
    cfg = NetworkConfig()
    save_checkpoint(tmp_path / "ck", init_params(cfg), cfg)
    (tmp_path / "ck" / "classifier.w.fcrt").unlink()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "ck")
