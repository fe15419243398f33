"""Command-line entry points: synth, train, infer, decode, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config
from .core import LabelVolume, Spacing, UnknownLevelError, VertebraLevel
from .data.io import (ManifestError, MalformedSidecarError, internal_labels_to_verse, load_split,
                      read_manifest, read_sidecar, read_volume, save_sample, verse_labels_to_internal,
                      write_manifest, write_volume)
from .data.phantom import PhantomOverflowError, PhantomSpec, generate_phantom
from .decode import DecodeConfig, MalformedOutputsError, decode_detections, load_outputs
from .evaluate import EvalReport, add_sample, emit_report
from .model import IncompatibleCheckpointError, ModelConfig, load_checkpoint
from .trainer import ConfigurationError, TrainingSchedule, build_model, fit, infer_volume, prepare_sample, seed_everything

log = logging.getLogger("spinedet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (ConfigError, ConfigurationError, ManifestError, PhantomOverflowError, MalformedSidecarError,
                UnknownLevelError, FileNotFoundError)


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser, output=True):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    if output:
        p.add_argument("--output-dir", help="all outputs are written here")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides, e.g. schedule.total_epochs=10")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spinedet", description="Vertebra labelling and segmentation.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    _common(p)
    p.add_argument("--manifest", help="dataset manifest (overrides data.manifest)")
    p.add_argument("--no-gcn", action="store_true", help="drop the classification branch")
    p.add_argument("--no-dist-loss", action="store_true")
    p.add_argument("--no-self-init", action="store_true")
    p.add_argument("--heat-mode", choices=["scheduled", "focal", "mse"])
    p.add_argument("--max-epochs", type=int, help="stop early after this many epochs")

    p = sub.add_parser("infer", help="run a trained model on a CT volume")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="NIfTI CT volume")
    p.add_argument("--no-postprocess", action="store_true")

    p = sub.add_parser("evaluate", help="score predicted label volumes against ground truth")
    _common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--variant", default="w/ PP")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("decode", help="decode saved network outputs into detections")
    _common(p)
    p.add_argument("outputs", help=".npz written by decode.save_outputs")
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--graph-dump", nargs="?", const="graph.json", help="also write the candidate graph (JSON)")

    p = sub.add_parser("synth", help="write a phantom dataset and manifest")
    _common(p)
    p.add_argument("--n", type=int, default=2, help="number of training phantoms")
    p.add_argument("--n-val", type=int, default=0, help="validation phantoms (0: validate on the training set)")
    p.add_argument("--n-vertebrae", type=int, default=6)
    p.add_argument("--start-level", default="T10")
    p.add_argument("--shape", type=int, nargs=3, default=(64, 64, 128))
    return ap


def resolve_config(args) -> dict:
    overrides = [o for o in getattr(args, "overrides", [])]
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["schedule"]["seed"] = args.seed
    if getattr(args, "output_dir", None):
        cfg["output_dir"] = args.output_dir
    if getattr(args, "manifest", None):
        cfg["data"]["manifest"] = args.manifest
    s = cfg["schedule"]
    if getattr(args, "no_gcn", False):
        s["use_gcn"] = False
    if getattr(args, "no_dist_loss", False):
        s["use_dist_loss"] = False
    if getattr(args, "no_self_init", False):
        s["use_self_init"] = False
    if getattr(args, "heat_mode", None):
        s["heat_mode"] = args.heat_mode
    cfg["model"]["use_gcn"] = bool(s["use_gcn"])
    cfg["decode"]["use_class_logits"] = bool(s["use_gcn"])
    if getattr(args, "no_postprocess", False):
        cfg["decode"]["postprocess"] = False
    return cfg


def _out_dir(cfg) -> Path:
    d = Path(cfg["output_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _spacing(value) -> Spacing | None:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return Spacing.isotropic(float(value))
    return Spacing(*[float(v) for v in value])


def cmd_train(args, cfg) -> int:
    if not cfg["data"]["manifest"]:
        raise UsageError("train needs --manifest or data.manifest")
    out = _out_dir(cfg)
    dump_config(cfg, out / "config.yaml")
    seed_everything(int(cfg["seed"]))
    model_cfg = ModelConfig.from_dict(cfg["model"])
    schedule = TrainingSchedule.from_dict(cfg["schedule"])
    manifest = read_manifest(cfg["data"]["manifest"])
    spacing = _spacing(cfg["data"]["spacing"])
    train = [prepare_sample(s, model_cfg, spacing) for s in load_split(manifest, cfg["data"]["train_split"])]
    val = [prepare_sample(s, model_cfg, spacing) for s in load_split(manifest, cfg["data"]["val_split"])]
    model = build_model(model_cfg, int(cfg["seed"]))
    result = fit(model, train, val, schedule, out, DecodeConfig(**cfg["decode"]), max_epochs=args.max_epochs,
                 checkpoint_extra={"data_spacing": cfg["data"]["spacing"]})
    from .plotting import training_curves

    training_curves(result.log_path, out / "training_curves.png")
    summary = {"best_checkpoint": str(result.best_checkpoint) if result.best_checkpoint else None,
               "best_validation_dsc": result.best_validation_dsc, "best_epoch": result.best_epoch,
               "switched_to_pred_boxes": result.state.switched_to_pred_boxes}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return EXIT_OK


def detections_json(dets) -> list:
    recs = []
    for d in dets:
        r = d.to_dict()
        r["label"] = int(internal_labels_to_verse(np.array([int(d.level) + 1]))[0])
        recs.append(r)
    return recs


def cmd_infer(args, cfg) -> int:
    out = _out_dir(cfg)
    model, payload = load_checkpoint(args.checkpoint)
    values, spacing, origin, orient = read_volume(args.image)
    train_spacing = _spacing(cfg["data"]["spacing"] or payload.get("data_spacing"))
    decode_cfg = DecodeConfig(**{**cfg["decode"], "use_class_logits": model.classification is not None})
    pred = infer_volume(model, values, spacing, train_spacing, decode_cfg)
    stem = Path(args.image).name.split(".")[0].removesuffix("_ct")
    write_volume(out / f"{stem}_seg.nii.gz", internal_labels_to_verse(pred.labels).astype(np.int16), spacing, origin,
                 orient)
    # centroids in the file's own voxel grid, VerSe style
    ctd = []
    for d in pred.detections:
        back = np.linalg.inv(_point_map(orient)) @ np.r_[d.centroid.xyz, 1.0]
        ctd.append({"label": int(internal_labels_to_verse(np.array([int(d.level) + 1]))[0]),
                    "X": float(back[0]), "Y": float(back[1]), "Z": float(back[2])})
    (out / f"{stem}_ctd.json").write_text(json.dumps(ctd, indent=1))
    (out / f"{stem}_detections.json").write_text(json.dumps(
        {"postprocess": decode_cfg.postprocess, "detections": detections_json(pred.detections)}, indent=1))
    print(f"{len(pred.detections)} detections -> {out}")
    return EXIT_OK


def _point_map(orient) -> np.ndarray:
    # file voxel -> internal voxel as a 4x4 affine
    import nibabel as nib

    return np.linalg.inv(nib.orientations.inv_ornt_aff(orient.transform, orient.file_shape))


def _read_labels(path) -> LabelVolume:
    data, spacing, origin, _ = read_volume(path)
    return LabelVolume(verse_labels_to_internal(np.rint(data).astype(np.int64)), spacing, origin)


def cmd_evaluate(args, cfg) -> int:
    out = _out_dir(cfg)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise UsageError("--pred-dir and --gt-dir must be directories")
    ids = lambda d: {p.name[: -len("_seg.nii.gz")] for p in d.glob("*_seg.nii.gz")}  # noqa: E731
    pred_ids, gt_ids = ids(pred_dir), ids(gt_dir)
    for sid in sorted(pred_ids ^ gt_ids):
        log.warning("sample %s is missing from %s; excluded", sid, "predictions" if sid in gt_ids else "ground truth")
    common = sorted(pred_ids & gt_ids)
    report = EvalReport(variant=args.variant, seed=int(cfg["seed"]))
    for sid in common:
        pred, gt = _read_labels(pred_dir / f"{sid}_seg.nii.gz"), _read_labels(gt_dir / f"{sid}_seg.nii.gz")
        pc, gc = pred_dir / f"{sid}_ctd.json", gt_dir / f"{sid}_ctd.json"
        pcs = read_sidecar(pc) if pc.exists() else None
        gcs = read_sidecar(gc) if gc.exists() else None
        add_sample(report, sid, pred, gt, pcs, gcs)
    emit_report(report, out / "report.json")
    emit_report(report, out / "report.csv")
    if not args.no_figures and report.per_sample:
        from .plotting import dsc_per_level

        dsc_per_level(report, out / "dsc_per_level.png")
    print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_decode(args, cfg) -> int:
    out = _out_dir(cfg)
    arrays = load_outputs(args.outputs)
    decode_cfg = DecodeConfig(**cfg["decode"])
    if arrays.get("class_logits") is None:
        decode_cfg.use_class_logits = False
    dets, graph = decode_detections(arrays["heatmap_logits"], arrays["offsets"], arrays["bbox_sizes"],
                                    arrays.get("class_logits"), int(arrays.get("n", 2)), decode_cfg,
                                    return_graph=True)
    (out / "detections.json").write_text(json.dumps(
        {"postprocess": decode_cfg.postprocess, "detections": detections_json(dets)}, indent=1))
    if args.graph_dump:
        target = out / Path(args.graph_dump).name
        if graph is None:
            target.write_text(json.dumps(None))
        else:
            graph.dump(target)
    print(f"{len(dets)} detections -> {out}")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    out = _out_dir(cfg)
    try:
        start = VertebraLevel[args.start_level.upper()]
    except KeyError:
        raise UsageError(f"unknown level {args.start_level!r}") from None
    seed = int(cfg["seed"])
    entries = []
    for i in range(args.n + args.n_val):
        spec = PhantomSpec(n_vertebrae=args.n_vertebrae, start_level=start, grid_shape=tuple(args.shape),
                           jitter_seed=seed * 1000 + i)
        entries.append(save_sample(generate_phantom(spec, f"phantom_{i:03d}"), out))
    splits = {"train": entries[: args.n], "val": entries[args.n:] or entries[: args.n]}
    write_manifest(out / "manifest.json", splits)
    print(f"{len(entries)} phantoms -> {out / 'manifest.json'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "evaluate": cmd_evaluate, "decode": cmd_decode,
            "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        # validate up front so bad keys/values are usage errors, not mid-run crashes
        ModelConfig.from_dict(cfg["model"])
        TrainingSchedule.from_dict(cfg["schedule"]).heat_config()
        DecodeConfig(**cfg["decode"])
        return COMMANDS[args.command](args, cfg)
    except (UsageError, *USAGE_ERRORS) as e:
        print(f"spinedet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IncompatibleCheckpointError, MalformedOutputsError) as e:
        print(f"spinedet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError) as e:
        if args.command in ("train", "synth") and isinstance(e, TypeError):
            print(f"spinedet {args.command}: configuration error: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"spinedet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"spinedet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
