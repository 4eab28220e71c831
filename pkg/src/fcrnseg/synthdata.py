"""Deterministic synthetic-shapes scenes with semantic, instance and box labels."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import read_tensor, write_tensor

NOISE_SIGMA = 0.05
BACKGROUND_COLOR = (0.45, 0.45, 0.45)
_PALETTE = [
    (0.90, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.15, 0.25, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.05, 0.05, 0.05),
    (0.98, 0.98, 0.98),
]


def category_color(category: int) -> tuple[float, float, float]:
    if category <= len(_PALETTE):
        return _PALETTE[category - 1]
    rng = np.random.default_rng(1000 + category)
    return tuple(float(v) for v in rng.uniform(0.05, 0.95, size=3))


@dataclass
class SceneConfig:
    image_height: int = 64
    image_width: int = 64
    num_categories: int = 3
    instances_per_image: tuple[int, int] = (1, 4)
    size_range: tuple[int, int] = (10, 28)
    class_skew: list[float] | None = None
    seed: int = 0
    # a new shape may hide at most this fraction of an earlier instance's visible pixels
    max_occlusion: float = 1.0
    max_placement_tries: int = 20

    def __post_init__(self):
        self.instances_per_image = tuple(int(v) for v in self.instances_per_image)
        self.size_range = tuple(int(v) for v in self.size_range)
        if self.class_skew is None:
            self.class_skew = [1.0] * self.num_categories
        self.class_skew = [float(v) for v in self.class_skew]

    def validate(self) -> None:
        lo, hi = self.instances_per_image
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if lo < 0 or hi < lo:
            raise ValueError(f"bad instances_per_image {self.instances_per_image}")
        smin, smax = self.size_range
        if smin < 3 or smax < smin:
            raise ValueError(f"bad size_range {self.size_range}")
        if smax > min(self.image_height, self.image_width):
            raise ValueError(
                f"size_range max {smax} exceeds image {self.image_height}x{self.image_width}: "
                "no feasible placement")
        if len(self.class_skew) != self.num_categories or min(self.class_skew) <= 0:
            raise ValueError("class_skew needs one positive weight per category")

    @property
    def class_probs(self) -> np.ndarray:
        w = np.asarray(self.class_skew, dtype=np.float64)
        return w / w.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["instances_per_image"] = list(self.instances_per_image)
        d["size_range"] = list(self.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class InstanceRecord:
    id: int
    category: int
    box: tuple[int, int, int, int]  # y0, x0, y1, x1, half-open

    def to_dict(self) -> dict:
        return {"id": self.id, "category": self.category, "box": list(self.box)}


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    semantic: np.ndarray  # [H, W] int, 0 = background
    instances: np.ndarray  # [H, W] int, 0 = none
    records: list[InstanceRecord] = field(default_factory=list)


def tight_boxes(instances: np.ndarray, ids) -> dict[int, tuple[int, int, int, int]]:
    """Half-open tight hull of every listed instance id."""
    out = {}
    for i in ids:
        ys, xs = np.nonzero(instances == i)
        if ys.size:
            out[int(i)] = (int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1)
    return out


def _shape_mask(rng, H, W, smin, smax):
    h = int(rng.integers(smin, smax + 1))
    w = int(rng.integers(smin, smax + 1))
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    mask = np.zeros((H, W), dtype=bool)
    if rng.random() < 0.5:
        mask[y0:y0 + h, x0:x0 + w] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        inside = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
        mask[y0:y0 + h, x0:x0 + w] = inside
    return mask


def generate_sample(config: SceneConfig, index: int) -> Sample:
    config.validate()
    H, W = config.image_height, config.image_width
    rng = np.random.default_rng([int(config.seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    lo, hi = config.instances_per_image
    n = int(rng.integers(lo, hi + 1))
    probs = config.class_probs

    owner = np.zeros((H, W), dtype=np.int64)
    cats = []
    for k in range(n):
        cat = int(rng.choice(config.num_categories, p=probs)) + 1
        for _ in range(config.max_placement_tries):
            mask = _shape_mask(rng, H, W, *config.size_range)
            if config.max_occlusion >= 1.0 or _occlusion_ok(owner, mask, config.max_occlusion):
                break
        else:
            continue
        cats.append(cat)
        owner[mask] = len(cats)

    # drop fully hidden shapes and renumber densely in drawing order
    present = [i for i in range(1, len(cats) + 1) if np.any(owner == i)]
    remap = np.zeros(len(cats) + 1, dtype=np.int64)
    for new, old in enumerate(present, start=1):
        remap[old] = new
    instances = remap[owner]
    cat_of = np.zeros(len(present) + 1, dtype=np.int64)
    for new, old in enumerate(present, start=1):
        cat_of[new] = cats[old - 1]
    semantic = cat_of[instances]

    boxes = tight_boxes(instances, range(1, len(present) + 1))
    records = [InstanceRecord(i, int(cat_of[i]), boxes[i]) for i in range(1, len(present) + 1)]

    palette = np.array([BACKGROUND_COLOR] + [category_color(c) for c in range(1, config.num_categories + 1)],
                       dtype=np.float64)
    image = palette[semantic].transpose(2, 0, 1)
    image = image + rng.normal(0.0, NOISE_SIGMA, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, semantic=semantic.astype(np.int64),
                  instances=instances.astype(np.int64), records=records)


def _occlusion_ok(owner, mask, limit):
    for i in np.unique(owner[mask]):
        if i == 0:
            continue
        visible = np.count_nonzero(owner == i)
        hidden = np.count_nonzero((owner == i) & mask)
        if hidden > limit * visible:
            return False
    return True


# -- manifests ---------------------------------------------------------------

def generate_dataset(config: SceneConfig, count: int, out_dir, start_index: int = 0) -> dict:
    """Write ``count`` samples plus ``manifest.json`` under ``out_dir``."""
    config.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    entries = []
    for j in range(count):
        idx = start_index + j
        s = generate_sample(config, idx)
        stem = f"{idx:06d}"
        files = {
            "image": f"{stem}_image.fcrt",
            "semantic": f"{stem}_semantic.fcrt",
            "instances": f"{stem}_instances.fcrt",
        }
        write_tensor(out / files["image"], s.image)
        write_tensor(out / files["semantic"], s.semantic.astype(np.float32))
        write_tensor(out / files["instances"], s.instances.astype(np.float32))
        entries.append({"index": idx, **files, "records": [r.to_dict() for r in s.records]})
    manifest = {"config": config.to_dict(), "samples": entries}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write manifest {path}: {e}") from e
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise OSError(f"cannot read manifest {path}: {e}") from e
    if "samples" not in manifest:
        raise ValueError(f"{path}: manifest has no 'samples' list")
    return manifest, path.parent


def load_sample(entry: dict, root) -> Sample:
    root = Path(root)
    image = read_tensor(root / entry["image"])
    semantic = read_tensor(root / entry["semantic"]).astype(np.int64)
    instances = read_tensor(root / entry["instances"]).astype(np.int64)
    records = [InstanceRecord(int(r["id"]), int(r["category"]), tuple(int(v) for v in r["box"]))
               for r in entry["records"]]
    return Sample(image, semantic, instances, records)


def load_samples(manifest_path) -> tuple[list[Sample], dict]:
    manifest, root = load_manifest(manifest_path)
    return [load_sample(e, root) for e in manifest["samples"]], manifest
