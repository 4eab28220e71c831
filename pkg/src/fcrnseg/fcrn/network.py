"""Small fully convolutional residual network with manual reverse-mode gradients."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..tensor import NonFiniteError, read_tensor, write_tensor
from . import layers as L
from .config import NetworkConfig, rebase_strides


class ParamStore:
    """Named parameters with matching gradient and momentum buffers."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = dict(params)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def num_scalars(self) -> int:
        return sum(v.size for v in self.params.values())


def _block_names(si, bi):
    return f"stage{si}.block{bi}"


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32,
                zero_init_residual: bool = True) -> ParamStore:
    """He-normal convs, unit affine scales; the last affine of each residual
    branch starts at zero so every block is initially the identity."""
    config.validate()
    rng = np.random.default_rng(seed)
    p = {}

    def conv(name, o, c, k):
        std = np.sqrt(2.0 / (c * k * k))
        p[name + ".w"] = rng.normal(0.0, std, size=(o, c, k, k))

    def aff(name, c, scale=1.0):
        p[name + ".scale"] = np.full(c, scale)
        p[name + ".shift"] = np.zeros(c)

    st = config.stem
    conv("stem.conv", st.channels, config.in_channels, st.kernel)
    aff("stem.aff", st.channels)
    c_in = st.channels
    for si, stage in enumerate(config.stages):
        for bi in range(stage.blocks):
            n = _block_names(si, bi)
            stride = stage.stride if bi == 0 else 1
            conv(n + ".conv1", stage.channels, c_in, 3)
            aff(n + ".aff1", stage.channels)
            conv(n + ".conv2", stage.channels, stage.channels, 3)
            aff(n + ".aff2", stage.channels, 0.0 if zero_init_residual else 1.0)
            if stride != 1 or c_in != stage.channels:
                conv(n + ".proj", stage.channels, c_in, 1)
                aff(n + ".proj_aff", stage.channels)
            c_in = stage.channels
    if config.multilayer_head:
        for h in range(2):
            conv(f"head.hidden{h}", config.head_hidden, c_in, 1)
            p[f"head.hidden{h}.b"] = np.zeros(config.head_hidden)
            c_in = config.head_hidden
    k = config.classifier_kernel
    p["classifier.w"] = rng.normal(0.0, 0.01, size=(config.out_channels, c_in, k, k))
    p["classifier.b"] = np.zeros(config.out_channels)
    return ParamStore({name: v.astype(dtype) for name, v in p.items()})


def _check(a, name):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite activation in layer {name}")


class _Runner:
    """Forward helpers that record what backward needs."""

    def __init__(self, P, check_finite):
        self.P = P
        self.check = check_finite

    def conv(self, name, x, stride, dil, bias=None):
        y, c = L.conv2d(x, self.P[name + ".w"], stride, dil, None if bias is None else self.P[bias])
        if self.check:
            _check(y, name)
        return y, ("conv", name, c, bias)

    def conv_aff(self, conv_name, aff_name, x, stride, dil):
        h, c = self.conv(conv_name, x, stride, dil)
        y = L.affine(h, self.P[aff_name + ".scale"], self.P[aff_name + ".shift"])
        return y, [c, ("aff", aff_name, h)]


def _run_back(P, grads, ops, g):
    for op in reversed(ops):
        if op[0] == "conv":
            _, name, c, bias = op
            g, dw, db = L.conv2d_backward(g, P[name + ".w"], c)
            grads[name + ".w"] += dw
            if bias is not None:
                grads[bias] += db
        elif op[0] == "aff":
            _, name, x = op
            g, ds, dsh = L.affine_backward(g, x, P[name + ".scale"])
            grads[name + ".scale"] += ds
            grads[name + ".shift"] += dsh
        elif op[0] == "relu":
            g = L.relu_backward(g, op[1])
    return g


def forward(params: ParamStore, config: NetworkConfig, image: np.ndarray, check_finite: bool = True):
    """Run the network on ``[3, H, W]`` or ``[N, 3, H, W]`` input.

    Returns ``(output, cache)`` with output ``[C, ceil(H/s), ceil(W/s)]``
    (batched inputs keep their leading axis).
    """
    single = image.ndim == 3
    x = image[None] if single else image
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got shape {image.shape}")
    min_side = config.fov() / 4
    if min(x.shape[2:]) < min_side:
        raise ValueError(f"input {x.shape[2:]} smaller than FoV/4 = {min_side:g} pixels; "
                         "the classifier would mostly see zero padding")
    x = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=params.dtype)
    stem_stride, sched = rebase_strides(config)
    P = params.params
    run = _Runner(P, check_finite)
    # each segment is a list of ops, or a residual block dict
    segments = []

    h, ops = run.conv_aff("stem.conv", "stem.aff", x, stem_stride, 1)
    h = L.relu(h)
    segments.append(ops + [("relu", h)])
    for si, (stage, sc) in enumerate(zip(config.stages, sched)):
        for bi in range(stage.blocks):
            n = _block_names(si, bi)
            stride = sc.stride if bi == 0 else 1
            r, branch = run.conv_aff(n + ".conv1", n + ".aff1", h, stride,
                                     sc.entry_dilation if bi == 0 else sc.dilation)
            r = L.relu(r)
            branch.append(("relu", r))
            r, ops = run.conv_aff(n + ".conv2", n + ".aff2", r, 1, sc.dilation)
            branch += ops
            if n + ".proj.w" in P:
                s, short = run.conv_aff(n + ".proj", n + ".proj_aff", h, stride, 1)
            else:
                s, short = h, []
            h = L.relu(r + s)
            segments.append({"branch": branch, "short": short, "out": h})
    if config.multilayer_head:
        ops = []
        for i in range(2):
            h, c = run.conv(f"head.hidden{i}", h, 1, 1, bias=f"head.hidden{i}.b")
            h = L.relu(h)
            ops += [c, ("relu", h)]
        segments.append(ops)
    out, c = run.conv("classifier", h, 1, config.classifier_dilation, bias="classifier.b")
    segments.append([c])
    out = out.transpose(1, 0, 2, 3)
    cache = {"segments": segments, "single": single, "out_shape": out.shape}
    return (out[0] if single else out), cache


def backward(params: ParamStore, cache: dict, upstream: np.ndarray, accumulate: bool = False):
    """Backpropagate ``upstream`` (shaped like the forward output).

    Writes parameter gradients into ``params.grads`` (summing into them if
    ``accumulate``) and returns the gradient with respect to the input.
    """
    g = upstream[None] if cache["single"] else upstream
    if g.shape != cache["out_shape"]:
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} does not match output "
                         f"{cache['out_shape'][1:] if cache['single'] else cache['out_shape']}")
    g = np.ascontiguousarray(g.transpose(1, 0, 2, 3), dtype=params.dtype)
    P = params.params
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    for seg in reversed(cache["segments"]):
        if isinstance(seg, dict):
            d = L.relu_backward(g, seg["out"])
            g = _run_back(P, grads, seg["branch"], d) + _run_back(P, grads, seg["short"], d)
        else:
            g = _run_back(P, grads, seg, g)
    for k, v in grads.items():
        if accumulate:
            params.grads[k] += v
        else:
            params.grads[k] = v
    dx = g.transpose(1, 0, 2, 3)
    return dx[0] if cache["single"] else dx


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """v <- m v + g + wd p (weights only); p <- p - lr v."""
    for name, p in params.params.items():
        g = params.grads[name]
        if weight_decay and name.endswith(".w"):
            g = g + weight_decay * p
        v = params.velocity[name]
        v *= momentum
        v += g
        upd = p - lr * v
        if not np.all(np.isfinite(upd)):
            raise NonFiniteError(f"non-finite update for parameter {name}")
        p[...] = upd


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, params: ParamStore, config: NetworkConfig, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, v in params.params.items():
        write_tensor(path / f"{name}.fcrt", v)
    meta = {"network": config.to_dict(), "params": sorted(params.params)}
    if extra:
        meta.update(extra)
    (path / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, dtype=np.float32) -> tuple[ParamStore, NetworkConfig, dict]:
    path = Path(path)
    cfg_path = path / "config.json"
    if not cfg_path.is_file():
        raise FileNotFoundError(f"checkpoint {path}: missing config.json")
    meta = json.loads(cfg_path.read_text(encoding="utf-8"))
    config = NetworkConfig.from_dict(meta["network"])
    params = {}
    for name in meta["params"]:
        f = path / f"{name}.fcrt"
        if not f.is_file():
            raise FileNotFoundError(f"checkpoint {path}: missing tensor {f.name}")
        params[name] = read_tensor(f).astype(dtype)
    store = ParamStore(params)
    ref = init_params(config, dtype=dtype)
    for name, v in ref.params.items():
        if name not in store.params or store[name].shape != v.shape:
            raise ValueError(f"checkpoint {path}: parameter {name} does not match config")
    return store, config, meta
