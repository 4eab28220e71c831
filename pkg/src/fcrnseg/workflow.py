"""End-to-end runs: inference, instance assembly and evaluation over a manifest."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .assembly import PipelineConfig, run_instance_pipeline, write_hypotheses
from .evaluation import GtInstance, PredInstance, format_report, instance_report, semantic_metrics
from .synthdata import Sample, load_manifest, load_sample
from .tensor import read_tensor, write_tensor
from .trainer import Model, infer


def oracle_probs(sample: Sample, num_categories: int, softness: float = 4.0) -> np.ndarray:
    """Score maps built from the ground truth instead of the semantic network.

    The true label always wins; its probability rises from 0.5 at a region
    border towards 1 with the distance to the nearest pixel of another region
    (another label or another instance), so instance interiors score highest.
    """
    region = sample.instances * (num_categories + 1) + sample.semantic
    dist = np.zeros(region.shape)
    for r in np.unique(region):
        inside = region == r
        d = ndimage.distance_transform_edt(inside)
        dist[inside] = d[inside]
    p_true = 0.5 + 0.5 * (1.0 - np.exp(-dist / softness))
    K1 = num_categories + 1
    probs = np.repeat(((1.0 - p_true) / (K1 - 1))[None], K1, axis=0)
    onehot = np.eye(K1, dtype=bool)[sample.semantic].transpose(2, 0, 1)
    probs[onehot] = np.broadcast_to(p_true, probs.shape)[onehot]
    return probs


def gt_instances(sample: Sample, image_id: int) -> list[GtInstance]:
    return [GtInstance(image_id, r.category, sample.instances == r.id, r.id) for r in sample.records]


def pipeline_for(loc: Model, cfg: PipelineConfig | None) -> PipelineConfig:
    """Default the transform-map upsampling to what the localization net was trained with."""
    cfg = cfg or PipelineConfig()
    return cfg if cfg.upsample is not None else replace(cfg, upsample=loc.upsample)


def predict_instances(sem: Model | None, loc: Model, sample: Sample, cfg: PipelineConfig,
                      oracle_semantic: bool = False):
    K = loc.network.num_categories
    probs = oracle_probs(sample, K) if oracle_semantic else infer(sem, sample.image)
    tmap = infer(loc, sample.image)
    return run_instance_pipeline(probs, tmap, cfg, loc.network.output_stride), probs, tmap


def evaluate_instances(sem, loc, samples, cfg=None, oracle_semantic=False) -> dict:
    cfg = pipeline_for(loc, cfg)
    preds, gts = [], []
    for i, s in enumerate(samples):
        hyps, _, _ = predict_instances(sem, loc, s, cfg, oracle_semantic)
        preds += [PredInstance(i, h.category, h.confidence, h.mask) for h in hyps]
        gts += gt_instances(s, i)
    return instance_report(preds, gts)


def evaluate_semantic(sem: Model, samples) -> dict:
    if not samples:
        raise ValueError("no samples to evaluate")
    K1 = sem.network.out_channels
    pred = np.stack([np.argmax(infer(sem, s.image), axis=0) for s in samples])
    gt = np.stack([s.semantic for s in samples])
    m = semantic_metrics(pred, gt, num_classes=K1)
    m["class_iou"] = {str(k): v for k, v in m["class_iou"].items()}
    return m


def load_models(checkpoint_root) -> tuple[Model, Model]:
    root = Path(checkpoint_root)
    missing = [d for d in ("semantic", "localization") if not (root / d / "config.json").is_file()]
    if missing:
        raise FileNotFoundError(
            f"checkpoint root {root}: missing {', '.join(d + '/config.json' for d in missing)}")
    sem, loc = Model.load(root / "semantic"), Model.load(root / "localization")
    if sem.network.head != "semantic" or loc.network.head != "localization":
        raise ValueError(f"checkpoint root {root}: head types do not match their directories")
    if sem.network.num_categories != loc.network.num_categories:
        raise ValueError("semantic and localization checkpoints disagree on the category count")
    return sem, loc


def run_inference(model: Model, manifest_path, out_dir) -> dict:
    """Write one score/transform tensor per manifest sample plus ``index.json``."""
    manifest, root = load_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kind = "probs" if model.network.head == "semantic" else "transform"
    entries = []
    for e in manifest["samples"]:
        s = load_sample(e, root)
        name = f"{int(e['index']):06d}_{kind}.fcrt"
        write_tensor(out / name, infer(model, s.image))
        entries.append({"index": e["index"], kind: name})
    index = {"kind": kind, "stride": model.network.output_stride, "upsample": model.upsample,
             "samples": entries}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return index


def assemble_from_files(probs_dir, transform_dir, out_dir, cfg: PipelineConfig | None = None) -> dict:
    """Run the instance pipeline on tensors written by :func:`run_inference`."""
    pi = json.loads((Path(probs_dir) / "index.json").read_text(encoding="utf-8"))
    ti = json.loads((Path(transform_dir) / "index.json").read_text(encoding="utf-8"))
    cfg = cfg or PipelineConfig()
    if cfg.upsample is None:
        cfg = replace(cfg, upsample=ti.get("upsample", "nearest"))
    tmaps = {e["index"]: e["transform"] for e in ti["samples"]}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for e in pi["samples"]:
        idx = e["index"]
        if idx not in tmaps:
            raise FileNotFoundError(f"no transform map for sample {idx} in {transform_dir}")
        probs = read_tensor(Path(probs_dir) / e["probs"])
        tmap = read_tensor(Path(transform_dir) / tmaps[idx])
        hyps = run_instance_pipeline(probs, tmap, cfg, ti["stride"])
        name = f"{int(idx):06d}.json"
        write_hypotheses(out / name, hyps, out / "masks", f"{int(idx):06d}")
        images.append({"index": idx, "hypotheses": name})
    index = {"pipeline": cfg.to_dict(), "images": images}
    (out / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return index


def evaluate_assembly(assembly_dir, manifest_path) -> dict:
    """Instance metrics for assembly output against a manifest's ground truth."""
    adir = Path(assembly_dir)
    index = json.loads((adir / "index.json").read_text(encoding="utf-8"))
    manifest, root = load_manifest(manifest_path)
    by_index = {e["index"]: e for e in manifest["samples"]}
    preds, gts = [], []
    for img_id, item in enumerate(index["images"]):
        entry = by_index.get(item["index"])
        if entry is None:
            raise KeyError(f"sample {item['index']} not in manifest {manifest_path}")
        s = load_sample(entry, root)
        gts += gt_instances(s, img_id)
        doc = json.loads((adir / item["hypotheses"]).read_text(encoding="utf-8"))
        for h in doc["hypotheses"]:
            mask = read_tensor(adir / h["mask_file"]) > 0.5
            preds.append(PredInstance(img_id, int(h["category"]), float(h["confidence"]), mask))
    return instance_report(preds, gts)


def run_end_to_end(manifest_path, checkpoint_root, out_dir, cfg: PipelineConfig | None = None,
                   oracle_semantic: bool = False) -> dict:
    """infer -> assemble -> evaluate over a manifest; writes per-image outputs and
    ``report.json`` / ``report.txt`` under ``out_dir``."""
    manifest, root = load_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"oracle_semantic": bool(oracle_semantic), "num_images": len(manifest["samples"])}
    if manifest["samples"]:
        sem, loc = load_models(checkpoint_root)
        cfg = pipeline_for(loc, cfg)
        report["pipeline"] = cfg.to_dict()
        preds, gts = [], []
        sem_pred, sem_gt = [], []
        for img_id, e in enumerate(manifest["samples"]):
            s = load_sample(e, root)
            hyps, probs, tmap = predict_instances(sem, loc, s, cfg, oracle_semantic)
            stem = f"{int(e['index']):06d}"
            write_hypotheses(out / "assembly" / f"{stem}.json", hyps, out / "assembly" / "masks", stem)
            preds += [PredInstance(img_id, h.category, h.confidence, h.mask) for h in hyps]
            gts += gt_instances(s, img_id)
            sem_pred.append(np.argmax(probs, axis=0))
            sem_gt.append(s.semantic)
        report["instance"] = instance_report(preds, gts)
        sm = semantic_metrics(np.stack(sem_pred), np.stack(sem_gt), num_classes=sem.network.out_channels)
        sm["class_iou"] = {str(k): v for k, v in sm["class_iou"].items()}
        report["semantic"] = sm
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    (out / "report.txt").write_text(format_report(_flatten(report)) + "\n", encoding="utf-8")
    return report


def _flatten(d, prefix=""):
    flat = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and not all(isinstance(x, (int, float)) for x in v.values()):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat
