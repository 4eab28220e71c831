"""Training loops for the semantic and localization networks, and inference."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxcoding import encode_targets
from .configfile import read_mapping
from .fcrn import NetworkConfig, ParamStore, backward, forward, init_params, load_checkpoint, \
    save_checkpoint, sgd_step
from .fcrn.layers import upsample, upsample_backward
from .losses import BootstrapConfig, bootstrapped_cross_entropy, instance_pixel_weights, \
    localization_loss, select_hard_localization, select_hard_semantic
from .synthdata import InstanceRecord, Sample, load_samples, tight_boxes
from .tensor import NonFiniteError, softmax_channels

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "poly"  # poly | step | constant
    power: float = 0.9
    step_size: int = 1000
    gamma: float = 0.1

    def lr_at(self, step: int, total: int) -> float:
        if self.lr_schedule == "poly":
            return self.lr * (1.0 - step / max(total, 1)) ** self.power
        if self.lr_schedule == "step":
            return self.lr * self.gamma ** (step // self.step_size)
        if self.lr_schedule == "constant":
            return self.lr
        raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8
    crop_size: int | None = None  # None trains on whole images
    iterations: int = 1000
    seed: int = 0
    manifest: str = ""
    upsample: str = "bilinear"
    flip: bool = True

    def __post_init__(self):
        if isinstance(self.network, dict):
            self.network = NetworkConfig.from_dict(self.network)
        if isinstance(self.bootstrap, dict):
            self.bootstrap = BootstrapConfig(**self.bootstrap)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)

    def validate(self) -> None:
        self.network.validate()
        self.bootstrap.validate()
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size is not None and self.crop_size < self.network.output_stride:
            raise ValueError("crop_size must be >= the network output stride")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(read_mapping(path))


@dataclass
class TrainResult:
    params: ParamStore
    log: list[dict]

    def log_csv(self) -> str:
        buf = io.StringIO()
        if self.log:
            w = csv.DictWriter(buf, fieldnames=list(self.log[0]), lineterminator="\n")
            w.writeheader()
            for row in self.log:
                w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


# -- batches ------------------------------------------------------------------------

def _crop_flip(sample: Sample, rng, crop, flip):
    _, H, W = sample.image.shape
    img, sem, ins = sample.image, sample.semantic, sample.instances
    if crop is not None and (crop < H or crop < W):
        ch, cw = min(crop, H), min(crop, W)
        y0 = int(rng.integers(0, H - ch + 1))
        x0 = int(rng.integers(0, W - cw + 1))
        img = img[:, y0:y0 + ch, x0:x0 + cw]
        sem = sem[y0:y0 + ch, x0:x0 + cw]
        ins = ins[y0:y0 + ch, x0:x0 + cw]
    if flip and rng.random() < 0.5:
        img, sem, ins = img[:, :, ::-1], sem[:, ::-1], ins[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(sem), np.ascontiguousarray(ins)


def _visible_records(ins, records):
    cat = {r.id: r.category for r in records}
    ids = [i for i in np.unique(ins) if i > 0]
    boxes = tight_boxes(ins, ids)
    return [InstanceRecord(int(i), cat[int(i)], boxes[int(i)]) for i in ids]


def _make_batch(samples, rng, cfg: TrainConfig):
    idx = rng.integers(0, len(samples), size=cfg.batch_size)
    imgs, sems, inss, recs = [], [], [], []
    for i in idx:
        img, sem, ins = _crop_flip(samples[i], rng, cfg.crop_size, cfg.flip)
        imgs.append(img)
        sems.append(sem)
        inss.append(ins)
        recs.append(_visible_records(ins, samples[i].records))
    return np.stack(imgs), np.stack(sems), np.stack(inss), recs


# -- training --------------------------------------------------------------------------

def _step(params, cfg: TrainConfig, head, imgs, sems, inss, recs, lr):
    net = cfg.network
    stride = net.output_stride
    out, cache = forward(params, net, imgs)
    up, mats = upsample(out, imgs.shape[-2:], stride, cfg.upsample)
    if head == "semantic":
        probs = softmax_channels(up)
        sel = select_hard_semantic(probs, sems, cfg.bootstrap)
        loss, g = bootstrapped_cross_entropy(probs, sems, sel)
    else:
        enc = [encode_targets(ins, r, stride) for ins, r in zip(inss, recs)]
        tgt = np.stack([e[0] for e in enc])
        cats = np.stack([e[1] for e in enc])
        w = np.stack([instance_pixel_weights(ins, r) for ins, r in zip(inss, recs)])
        sel = select_hard_localization(up, tgt, cats, w, cfg.bootstrap, stride)
        loss, g = localization_loss(up, tgt, cats, sel)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss")
    backward(params, cache, upsample_backward(g.astype(up.dtype), mats))
    sgd_step(params, lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
    return loss, sel


def _train(cfg: TrainConfig, samples, head: str, params: ParamStore | None = None) -> TrainResult:
    cfg.validate()
    net = cfg.network
    if net.head != head:
        raise ValueError(f"config head is {net.head!r}, expected {head!r}")
    if not samples:
        raise TrainingError("empty training set")
    if head == "localization" and not any(np.any(s.instances > 0) for s in samples):
        raise TrainingError("no foreground pixels in the training set")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(net, seed=cfg.seed)
    rows = []
    for step in range(cfg.iterations):
        lr = cfg.optimizer.lr_at(step, cfg.iterations)
        imgs, sems, inss, recs = _make_batch(samples, rng, cfg)
        try:
            loss, sel = _step(params, cfg, head, imgs, sems, inss, recs, lr)
        except NonFiniteError as e:
            raise TrainingError(f"divergence at step {step}: {e}") from e
        rows.append({"step": step, "loss": float(loss), "threshold": float(sel.threshold),
                     "kept": int(sel.kept.size), "lr": float(lr)})
        if step % 50 == 0:
            log.info("%s step %d loss %.4f kept %d thr %.3f", head, step, loss, sel.kept.size, sel.threshold)
    return TrainResult(params, rows)


def train_semantic(cfg: TrainConfig, samples=None, out_dir=None, params=None) -> TrainResult:
    """Softmax cross-entropy with bootstrapped pixel selection."""
    samples = samples if samples is not None else load_samples(cfg.manifest)[0]
    res = _train(cfg, samples, "semantic", params)
    if out_dir is not None:
        write_training_outputs(out_dir, cfg, res)
    return res


def train_localization(cfg: TrainConfig, samples=None, out_dir=None, params=None) -> TrainResult:
    """Size-weighted smoothed-l1 with IoU-bootstrapped pixel selection."""
    samples = samples if samples is not None else load_samples(cfg.manifest)[0]
    res = _train(cfg, samples, "localization", params)
    if out_dir is not None:
        write_training_outputs(out_dir, cfg, res)
    return res


def write_training_outputs(out_dir, cfg: TrainConfig, res: TrainResult) -> None:
    out = Path(out_dir)
    save_checkpoint(out, res.params, cfg.network, {"train": cfg.to_dict(), "upsample": cfg.upsample})
    (out / "log.csv").write_text(res.log_csv(), encoding="utf-8")


# -- inference --------------------------------------------------------------------------

@dataclass
class Model:
    params: ParamStore
    network: NetworkConfig
    upsample: str = "bilinear"

    @classmethod
    def load(cls, path) -> "Model":
        params, net, meta = load_checkpoint(path)
        return cls(params, net, meta.get("upsample", "nearest"))


def infer(model: Model, image: np.ndarray, upsample_mode: str | None = None) -> np.ndarray:
    """Semantic head: softmax probabilities at input resolution.
    Localization head: raw transform maps on the stride grid."""
    if image.ndim not in (3, 4) or image.shape[-3] != model.network.in_channels:
        raise ValueError(f"image shape {image.shape} does not fit the checkpoint")
    out, _ = forward(model.params, model.network, image)
    if model.network.head == "localization":
        return out
    mode = upsample_mode or model.upsample
    up, _ = upsample(out, image.shape[-2:], model.network.output_stride, mode)
    return softmax_channels(up)


def predict_labels(model: Model, images: np.ndarray, batch: int = 32) -> np.ndarray:
    outs = []
    for i in range(0, len(images), batch):
        outs.append(np.argmax(infer(model, images[i:i + batch]), axis=1))
    return np.concatenate(outs)
