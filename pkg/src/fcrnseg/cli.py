"""Command-line entry point: ``fcrnseg <command> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .assembly import PipelineConfig
from .configfile import read_mapping
from .evaluation import format_report
from .fcrn.fov import fov_table, format_fov_table
from .synthdata import SceneConfig, generate_dataset, load_samples
from .tensor import NonFiniteError, TensorFormatError
from .trainer import Model, TrainConfig, TrainingError, train_localization, train_semantic
from .workflow import assemble_from_files, evaluate_assembly, evaluate_semantic, run_end_to_end, run_inference

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig(**read_mapping(args.config)) if getattr(args, "config", None) else PipelineConfig()
    overrides = {k: v for k, v in (("top_n", args.top_n), ("box_nms_iou", args.box_nms),
                                   ("region_nms_iou", args.region_nms)) if v is not None}
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# -- commands ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    scene = SceneConfig.from_dict(read_mapping(args.config)) if args.config else SceneConfig()
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    scene.validate()
    m = generate_dataset(scene, args.count, args.out, start_index=args.start)
    print(f"wrote {len(m['samples'])} samples to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


def _train_config(args, head) -> TrainConfig:
    data = read_mapping(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(data)
    if "head" not in data.get("network", {}):
        cfg.network = replace(cfg.network, head=head)
    if "mode" not in data.get("bootstrap", {}):
        cfg.bootstrap = replace(cfg.bootstrap, mode=head)
    if args.manifest:
        cfg.manifest = str(args.manifest)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.min_kept is not None:
        cfg.bootstrap = replace(cfg.bootstrap, min_kept=args.min_kept)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if not cfg.manifest:
        raise ValueError("no training manifest: pass --manifest or set 'manifest' in the config")
    cfg.validate()
    return cfg


def _train(args, head, fn) -> int:
    cfg = _train_config(args, head)
    samples, _ = load_samples(cfg.manifest)
    res = fn(cfg, samples, out_dir=args.out)
    last = res.log[-1]
    print(f"{head}: {len(res.log)} steps, final loss {last['loss']:.4f}, checkpoint in {args.out}")
    return EXIT_OK


def cmd_train_semantic(args) -> int:
    return _train(args, "semantic", train_semantic)


def cmd_train_loc(args) -> int:
    return _train(args, "localization", train_localization)


def cmd_infer(args) -> int:
    idx = run_inference(Model.load(args.checkpoint), args.manifest, args.out)
    print(f"wrote {len(idx['samples'])} {idx['kind']} tensors to {args.out}")
    return EXIT_OK


def cmd_assemble(args) -> int:
    idx = assemble_from_files(args.probs, args.transforms, args.out, _pipeline_config(args))
    print(f"assembled {len(idx['images'])} images into {args.out}")
    return EXIT_OK


def cmd_eval_semantic(args) -> int:
    samples, _ = load_samples(args.manifest)
    m = evaluate_semantic(Model.load(args.checkpoint), samples)
    if args.out:
        _write_json(Path(args.out) / "semantic.json", m)
    print(format_report(m))
    return EXIT_OK


def cmd_eval_instance(args) -> int:
    r = evaluate_assembly(args.assembly, args.manifest)
    if args.out:
        _write_json(Path(args.out) / "instance.json", r)
    print(format_report(r))
    return EXIT_OK


def cmd_fov_table(args) -> int:
    computed, bad = fov_table()
    text = format_fov_table(computed)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "fov_table.txt").write_text(text + "\n", encoding="utf-8")
    if bad:
        print(f"{len(bad)} row(s) disagree with the reference FoV values", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_run(args) -> int:
    report = run_end_to_end(args.manifest, args.checkpoint, args.out, _pipeline_config(args),
                            oracle_semantic=args.oracle_semantic)
    print((Path(args.out) / "report.txt").read_text(encoding="utf-8"), end="")
    if "instance" not in report:
        print("empty manifest: nothing evaluated")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcrnseg", description="Synthetic-scene semantic and instance segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    def pipeline_flags(sp):
        sp.add_argument("--config", type=Path, help="pipeline config (JSON or TOML)")
        sp.add_argument("--top-n", type=int, help="keep pixels whose category ranks in the top n")
        sp.add_argument("--box-nms", type=float, help="box NMS IoU threshold")
        sp.add_argument("--region-nms", type=float, help="region (mask) NMS IoU threshold")

    sp = add("synth", cmd_synth, "generate a synthetic dataset")
    sp.add_argument("--config", type=Path, help="scene config (JSON or TOML)")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--start", type=int, default=0, help="first sample index")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", type=Path, required=True)

    for name, fn, what in (("train-semantic", cmd_train_semantic, "semantic"),
                           ("train-loc", cmd_train_loc, "localization")):
        sp = add(name, fn, f"train the {what} network")
        sp.add_argument("--config", type=Path, help="training config (JSON or TOML)")
        sp.add_argument("--manifest", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--min-kept", type=int, help="bootstrapping: hardest pixels always kept")
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--out", type=Path, required=True, help="checkpoint directory")

    sp = add("infer", cmd_infer, "write score or transform maps for a manifest")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("assemble", cmd_assemble, "turn score and transform maps into instances")
    sp.add_argument("--probs", type=Path, required=True, help="infer output of the semantic net")
    sp.add_argument("--transforms", type=Path, required=True, help="infer output of the localization net")
    sp.add_argument("--out", type=Path, required=True)
    pipeline_flags(sp)

    sp = add("eval-semantic", cmd_eval_semantic, "pixel accuracy, mean accuracy and mean IoU")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path)

    sp = add("eval-instance", cmd_eval_instance, "region mAP of assembled instances")
    sp.add_argument("--assembly", type=Path, required=True)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--out", type=Path)

    sp = add("fov-table", cmd_fov_table, "recompute the reference field-of-view table")
    sp.add_argument("--out", type=Path)

    sp = add("run", cmd_run, "infer, assemble and evaluate in one go")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--checkpoint", type=Path, required=True,
                    help="directory holding semantic/ and localization/ checkpoints")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--oracle-semantic", action="store_true",
                    help="use ground-truth-derived score maps instead of the semantic net")
    pipeline_flags(sp)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TrainingError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError, TypeError, FileNotFoundError, TensorFormatError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
