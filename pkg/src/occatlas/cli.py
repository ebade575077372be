"""Batch command-line entry points tying the pipeline together.

Subcommands: gen, dataset, train, infer, eval, baseline. Every command is
deterministic given its manifest (config snapshot + seeds), and every
output directory gets exactly one ``manifest.json``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import Template, match_and_transfer, save_template_library
from .infer import (
    load_boxes_json,
    reconstruct_atlas,
    save_boxes_json,
)
from .metrics import aggregate, evaluate_boxes, write_metric_csv
from .occnet import (
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    train_loop,
    write_trace,
)
from .phantom import PhantomGenerationError, PhantomSpec, generate_phantom
from .sensor import CameraPose, backproject, load_xyz, render_depth, save_xyz
from .sortsample import (
    DegeneratePairError,
    build_training_pair,
    load_pair,
    save_pair,
)
from .phantom import extract_skin
from .volume import aabb_of_class, load_olv, save_olv

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# Fixed frontal pose used for evaluation clouds and template captures.
EVAL_CAMERA_DISTANCE = 2.0


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read config {path}: {e}", EXIT_USAGE)


def _merge(config: dict, args, keys) -> dict:
    """Flags win over config-file values; config fills unset flags."""
    merged = dict(config)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _write_manifest(out_dir: Path, command: str, config: dict, elapsed: float):
    manifest = {
        "command": command,
        "config": config,
        "tool_version": __version__,
        "elapsed_seconds": round(elapsed, 3),
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)


def _reference_boxes(volume) -> dict:
    return {c: aabb_of_class(volume, c) for c in range(1, volume.num_classes + 1)}


def _frontal_cloud(volume, seed: int):
    """Fixed-configuration frontal capture (no deformation or rotation)."""
    skin = extract_skin(volume)
    if skin.is_empty:
        raise CliError("volume has no labeled voxels to render", EXIT_DATA)
    idx = np.argwhere(np.asarray(volume.labels) > 0)
    center = volume.origin + volume.spacing * (0.5 * (idx.min(axis=0) + idx.max(axis=0) + 1))
    pose = CameraPose(EVAL_CAMERA_DISTANCE, 0.0, 0.0, center)
    depth = render_depth(skin, pose)
    if not np.isfinite(depth).any():
        raise CliError("frontal render missed the body", EXIT_DATA)
    return backproject(depth, seed=seed), pose


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    config = _merge(
        _load_config(args.config),
        args,
        ["seed", "num_train", "num_eval", "num_structures", "packing"],
    )
    config.setdefault("seed", 0)
    config.setdefault("num_train", 16)
    config.setdefault("num_eval", 4)
    config.setdefault("num_structures", 5)
    config.setdefault("packing", "touching")
    out = Path(args.out)
    start = time.monotonic()
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "eval").mkdir(parents=True, exist_ok=True)
    try:
        for split, count, base in (
            ("train", config["num_train"], 0),
            ("eval", config["num_eval"], 10_000),
        ):
            for i in range(count):
                spec = PhantomSpec(
                    seed=config["seed"] + base + i,
                    num_structures=config["num_structures"],
                    packing=config["packing"],
                )
                volume = generate_phantom(spec)
                stem = out / split / f"phantom_{i:04d}"
                save_olv(volume, f"{stem}.olv")
                with open(f"{stem}.spec.json", "w") as f:
                    json.dump(spec.to_json(), f, sort_keys=True)
                if split == "eval":
                    # Reference boxes + a frontal conditioning cloud per case.
                    boxes = _reference_boxes(volume)
                    save_boxes_json(boxes, f"{stem}.boxes.json")
                    cloud, _ = _frontal_cloud(volume, seed=spec.seed)
                    save_xyz(cloud, f"{stem}.xyz")
    except PhantomGenerationError as e:
        raise CliError(str(e), EXIT_DATA)
    _write_manifest(out, "gen", config, time.monotonic() - start)
    return EXIT_OK


def cmd_dataset(args) -> int:
    config = _merge(
        _load_config(args.config), args, ["seed", "augmentations", "n", "deform"]
    )
    config.setdefault("seed", 0)
    config.setdefault("augmentations", 8)
    config.setdefault("n", 32)
    config.setdefault("deform", True)
    volumes_dir = Path(args.volumes)
    volume_paths = sorted(volumes_dir.glob("*.olv"))
    if not volume_paths:
        raise CliError(f"no .olv volumes found in {volumes_dir}", EXIT_DATA)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    discards: dict[str, int] = {}
    pair_index = 0
    for vi, path in enumerate(volume_paths):
        volume = load_olv(path)
        for a in range(config["augmentations"]):
            seed = config["seed"] + 1000 * vi + a
            try:
                pair = build_training_pair(
                    volume, seed=seed, n=config["n"], deform=bool(config["deform"])
                )
            except DegeneratePairError as e:
                discards[str(e)] = discards.get(str(e), 0) + 1
                continue
            save_pair(pair, out / f"pair_{pair_index:05d}.bin")
            pair_index += 1
    config["pairs_written"] = pair_index
    config["discards"] = discards
    for reason, count in discards.items():
        print(f"discarded {count} pair(s): {reason}", file=sys.stderr)
    _write_manifest(out, "dataset", config, time.monotonic() - start)
    return EXIT_OK


def cmd_train(args) -> int:
    config_file = _load_config(args.config)
    merged = _merge(
        config_file,
        args,
        ["seed", "epochs", "learning_rate", "lam", "point_drop", "rotation_augmentation", "target_accuracy", "pairs_per_batch"],
    )
    merged.setdefault("seed", 0)
    merged.setdefault("epochs", 30)
    dataset_dir = Path(args.dataset)
    pair_paths = sorted(dataset_dir.glob("pair_*.bin"))
    if not pair_paths:
        raise CliError(f"no training pairs found in {dataset_dir}", EXIT_DATA)
    pairs = [load_pair(p) for p in pair_paths]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    train_config = TrainConfig(**{k: v for k, v in merged.items() if k in known})
    start = time.monotonic()
    resume_model = resume_adam = None
    trace_exists = False
    if args.resume:
        resume_model = load_checkpoint(out / "checkpoint.bin")
        trace_exists = (out / "loss_trace.csv").exists()
        from .occnet import AdamState

        resume_adam = AdamState()
        if trace_exists:
            import csv as _csv

            with open(out / "loss_trace.csv") as f:
                rows = list(_csv.reader(f))[1:]
            resume_adam.t = int(rows[-1][0]) if rows else 0
    try:
        model, trace = train_loop(
            pairs, train_config, model=resume_model, adam=resume_adam
        )
    except NonFiniteLossError as e:
        raise CliError(str(e), EXIT_NUMERIC)
    from .occnet import save_checkpoint

    save_checkpoint(model, out / "checkpoint.bin")
    write_trace(trace, out / "loss_trace.csv", append=trace_exists)
    _write_manifest(out, "train", merged, time.monotonic() - start)
    return EXIT_OK


def cmd_infer(args) -> int:
    cloud_path = Path(args.cloud)
    if not cloud_path.exists():
        raise CliError(f"cloud file not found: {cloud_path}", EXIT_DATA)
    model = load_checkpoint(args.checkpoint)
    if args.num_classes is not None and args.num_classes != model.num_classes:
        raise CliError(
            f"checkpoint has {model.num_classes} classes, expected {args.num_classes}",
            EXIT_DATA,
        )
    cloud = load_xyz(cloud_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    pred = reconstruct_atlas(
        model,
        cloud,
        probes=args.probes,
        resolution=args.resolution,
        margin=args.margin,
        seed=args.seed or 0,
    )
    save_olv(pred.volume, out / "atlas.olv")
    save_boxes_json(pred.boxes, out / "boxes.json")
    if args.meshes:
        from .infer import extract_atlas_meshes

        for class_id, mesh in extract_atlas_meshes(pred):
            mesh.save_obj(out / f"class_{class_id:02d}.obj")
    config = {
        "checkpoint": str(args.checkpoint),
        "cloud": str(cloud_path),
        "probes": args.probes,
        "resolution": args.resolution,
        "margin": args.margin,
        "seed": args.seed or 0,
    }
    _write_manifest(out, "infer", config, time.monotonic() - start)
    return EXIT_OK


def _boxes_from_path(path: Path) -> dict:
    if path.suffix == ".olv":
        return _reference_boxes(load_olv(path))
    return load_boxes_json(path)


def _collect_cases(directory: Path, pattern_exts) -> dict[str, Path]:
    cases = {}
    for ext in pattern_exts:
        for p in sorted(directory.glob(f"*{ext}")):
            stem = p.name[: -len(ext)]
            cases.setdefault(stem, p)
    return cases


def cmd_eval(args) -> int:
    pred_dir = Path(args.predictions)
    ref_dir = Path(args.references)
    preds = _collect_cases(pred_dir, [".boxes.json"])
    if not preds:
        # Allow a directory of per-case subdirectories from cmd_infer.
        preds = {
            p.parent.name: p for p in sorted(pred_dir.glob("*/boxes.json"))
        }
    refs = _collect_cases(ref_dir, [".boxes.json", ".olv"])
    if not preds or not refs:
        raise CliError("no predictions or references found", EXIT_DATA)
    common = sorted(set(preds) & set(refs))
    if not common:
        raise CliError(
            f"id mismatch: predictions {sorted(preds)} vs references {sorted(refs)}",
            EXIT_DATA,
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    records = []
    for case in common:
        records.extend(
            evaluate_boxes(_boxes_from_path(preds[case]), _boxes_from_path(refs[case]))
        )
    summaries = aggregate(records)
    for metric, filename in (
        ("cd_cm", "cd.csv"),
        ("iou", "iou.csv"),
        ("esf", "esf.csv"),
    ):
        write_metric_csv(summaries[metric], out / filename)
    _write_manifest(
        out,
        "eval",
        {"cases": common, "predictions": str(pred_dir), "references": str(ref_dir)},
        time.monotonic() - start,
    )
    return EXIT_OK


def cmd_baseline(args) -> int:
    template_dir = Path(args.templates)
    template_paths = sorted(template_dir.glob("*.olv"))
    if not template_paths:
        raise CliError(f"no template volumes in {template_dir}", EXIT_DATA)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    seed = args.seed or 0

    templates = []
    for i, path in enumerate(template_paths):
        volume = load_olv(path)
        cloud, _ = _frontal_cloud(volume, seed=seed + i)
        templates.append(Template(path.stem, cloud, _reference_boxes(volume)))
    save_template_library(templates, out / "library")

    cloud_dir = Path(args.clouds)
    cloud_paths = sorted(cloud_dir.glob("*.xyz"))
    if not cloud_paths:
        raise CliError(f"no patient clouds in {cloud_dir}", EXIT_DATA)
    selections = {}
    for path in cloud_paths:
        stem = path.name[: -len(".xyz")]
        patient = load_xyz(path)
        boxes, winner, score = match_and_transfer(patient, templates)
        save_boxes_json(boxes, out / f"{stem}.boxes.json")
        selections[stem] = {"template": winner, "chamfer_m": score}

    config = {
        "templates": str(template_dir),
        "clouds": str(cloud_dir),
        "seed": seed,
        "selections": selections,
    }
    if args.references:
        records = []
        refs = _collect_cases(Path(args.references), [".boxes.json", ".olv"])
        for stem in selections:
            if stem in refs:
                records.extend(
                    evaluate_boxes(
                        load_boxes_json(out / f"{stem}.boxes.json"),
                        _boxes_from_path(refs[stem]),
                    )
                )
        if records:
            summaries = aggregate(records)
            for metric, filename in (
                ("cd_cm", "cd.csv"),
                ("iou", "iou.csv"),
                ("esf", "esf.csv"),
            ):
                write_metric_csv(summaries[metric], out / filename)
    _write_manifest(out, "baseline", config, time.monotonic() - start)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occatlas",
        description="Occluded-structure localization pipeline (phantom data, "
        "occupancy network, AABB metrics, ICP baseline).",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--out", type=str, required=True, help="output directory")

    p = sub.add_parser("gen", help="generate phantom volumes (train + eval splits)")
    common(p)
    p.add_argument("--num-train", dest="num_train", type=int, default=None)
    p.add_argument("--num-eval", dest="num_eval", type=int, default=None)
    p.add_argument("--num-structures", dest="num_structures", type=int, default=None)
    p.add_argument("--packing", choices=["touching", "separated"], default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("dataset", help="build (cloud, occupancy samples) training pairs")
    common(p)
    p.add_argument("--volumes", required=True, help="directory of .olv volumes")
    p.add_argument("--augmentations", type=int, default=None, help="pairs per volume")
    p.add_argument("--n", type=int, default=None, help="samples per side per structure")
    p.add_argument("--no-deform", dest="deform", action="store_const", const=False, default=None)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the occupancy network")
    common(p)
    p.add_argument("--dataset", required=True, help="directory of pair files")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--no-point-drop", dest="point_drop", action="store_const", const=False, default=None)
    p.add_argument(
        "--no-rotation", dest="rotation_augmentation", action="store_const", const=False, default=None
    )
    p.add_argument("--target-accuracy", dest="target_accuracy", type=float, default=None)
    p.add_argument("--pairs-per-batch", dest="pairs_per_batch", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="hierarchical atlas reconstruction from a cloud")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True, help=".xyz point cloud in camera space")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--probes", type=int, default=40_000)
    p.add_argument("--margin", type=float, default=0.15)
    p.add_argument("--num-classes", dest="num_classes", type=int, default=None)
    p.add_argument("--meshes", action="store_true", help="also export per-class OBJ meshes")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AABB metrics (CD, IoU, ESF) against references")
    common(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True, help=".boxes.json or .olv per case")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="ICP template-matching baseline")
    common(p)
    p.add_argument("--templates", required=True, help="directory of template .olv volumes")
    p.add_argument("--clouds", required=True, help="directory of patient .xyz clouds")
    p.add_argument("--references", default=None, help="optional reference boxes for metrics")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FileNotFoundError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
