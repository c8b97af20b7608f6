"""Command-line driver: ``synth``, ``reconstruct`` and ``eval``.

Settings resolve as command-line flags over the manifest's ``config`` block
over built-in defaults. Logs go to stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

from .estimator import CONFIDENCE_MODES, LayoutDepthEstimator
from .exceptions import DomainError
from .fusion import FUSION_THRESHOLD, fuse
from .io import read_json, write_float_raster, write_json
from .metrics import EvalReport, evaluate, write_error_histogram, write_error_png
from .mvs import DEFAULT_SMOOTHING_SIZE, DEFAULT_TEMPERATURE, MAX_ELEMENT_PIXELS
from .scene import (
    SceneManifest,
    _view_name,
    fixture_path,
    read_correspondences,
    read_depth,
    read_layouts,
    read_scene_layout,
    read_structure,
    render_scene,
    write_layout3d,
    write_scene,
    write_scene_layout,
)

log = logging.getLogger("panolayout")

OUTPUT_ENV = "PANOLAYOUT_OUTPUT_DIR"

DEFAULTS = {
    "hyp_count": 128,
    "hyp_min": 0.3,
    "hyp_max": 12.0,
    "spacing": "inverse",
    "temperature": DEFAULT_TEMPERATURE,
    "patch_size": 5,
    "smoothing": True,
    "smoothing_size": DEFAULT_SMOOTHING_SIZE,
    "confidence": "semantic",
    "max_pixels": MAX_ELEMENT_PIXELS,
    "fusion_threshold": FUSION_THRESHOLD,
    "threads": 1,
    "seed": 0,
    "dump_probabilities": False,
}


class JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        for key in ("stage", "seconds", "error", "path"):
            if hasattr(record, key):
                entry[key] = getattr(record, key)
        return json.dumps(entry, sort_keys=True)


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


@contextmanager
def stage(name: str):
    start = time.perf_counter()
    yield
    seconds = round(time.perf_counter() - start, 3)
    log.info("stage %s done", name, extra={"stage": name, "seconds": seconds})


def resolve_config(args: argparse.Namespace, manifest_config: dict | None = None) -> dict:
    """Merge defaults, then the manifest's config block, then explicit flags."""
    config = dict(DEFAULTS)
    for key, value in (manifest_config or {}).items():
        if key not in DEFAULTS:
            raise DomainError(f"unknown manifest config key {key!r}")
        config[key] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    if getattr(args, "no_smoothing", False):
        config["smoothing"] = False
    return config


def _output_dir(args, manifest: SceneManifest | None = None) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if manifest is not None and manifest.output_dir is not None:
        return manifest.output_dir
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    raise DomainError(f"no output directory: pass --out or set {OUTPUT_ENV}")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec_path = Path(args.spec) if Path(args.spec).exists() else fixture_path(args.spec)
    description = read_json(spec_path)
    if args.image_height is not None:
        description["image_height"] = args.image_height
    if args.n_views is not None and args.n_views < 1:
        raise UsageError("--n-views must be at least 1")
    out = _output_dir(args)
    with stage("render"):
        views = render_scene(description, seed=args.seed or 0, n_views=args.n_views)
    with stage("write"):
        write_scene(views, out, description, seed=args.seed or 0)
    log.info("wrote %d views to %s", len(views), out)
    return 0


def reconstruct(manifest: SceneManifest, config: dict, out: Path, view_ids=None) -> dict:
    """Run the full pipeline on a manifest and write every output file."""
    entries = manifest.views
    if view_ids is not None:
        known = {v.view_id for v in entries}
        missing = sorted(set(view_ids) - known)
        if missing:
            raise DomainError(f"--views names unknown view ids {missing}")
        entries = [v for v in entries if v.view_id in set(view_ids)]
    with stage("load"):
        inputs = [manifest.load_view(v) for v in entries]
    groups: dict[int, list[int]] = {}
    for index, entry in enumerate(entries):
        groups.setdefault(entry.group, []).append(index)
    results = {}
    with stage("depth"):
        for group in sorted(groups):
            members = [inputs[i] for i in groups[group]]
            if len(members) == 1:
                log.warning("view %d is alone in its group; it is matched against itself", members[0].view_id)
            estimator = LayoutDepthEstimator(
                hyp_count=int(config["hyp_count"]),
                hyp_min=float(config["hyp_min"]),
                hyp_max=float(config["hyp_max"]),
                spacing=config["spacing"],
                temperature=float(config["temperature"]),
                patch_size=int(config["patch_size"]),
                smoothing=bool(config["smoothing"]),
                smoothing_size=int(config["smoothing_size"]),
                confidence=config["confidence"],
                max_pixels=int(config["max_pixels"]),
                threads=int(config["threads"]),
                semantic_table=manifest.table(),
            ).fit(members)
            for result in estimator.predict_results():
                results[result.layout.view_id] = result
    layouts = [results[v.view_id].layout for v in entries]
    out.mkdir(parents=True, exist_ok=True)
    with stage("write_views"):
        for layout in layouts:
            write_layout3d(out, layout)
            if config["dump_probabilities"]:
                write_float_raster(out / _view_name(layout.view_id, "prob.bin"), results[layout.view_id].volume.probabilities)
    with stage("fuse"):
        scene = fuse(layouts, threshold=float(config["fusion_threshold"]))
        write_scene_layout(out, scene)
    write_json(out / "config.json", config)
    summary = {"views": len(layouts), "fused_elements": len(scene.elements)}
    if manifest.gt_dir is not None:
        with stage("eval"):
            report = evaluate_dirs(out, manifest.gt_dir, view_ids=[v.view_id for v in entries])
            write_json(out / "eval.json", report.to_dict())
            for layout in layouts:
                gt_depth = read_depth(manifest.gt_dir, layout.view_id)
                if gt_depth is not None:
                    pred_depth = layout.depth_raster()
                    write_error_png(out / _view_name(layout.view_id, "error.png"), pred_depth, gt_depth, vmax=0.5)
                    write_error_histogram(out / _view_name(layout.view_id, "error_hist.csv"), pred_depth, gt_depth, max_error=0.5)
        summary["eval"] = report.to_dict()
    return summary


def evaluate_dirs(pred_dir, gt_dir, view_ids=None) -> EvalReport:
    """Compare a prediction folder with a ground-truth folder of the same format.

    Depth and scale use the per-view layouts; coherency uses the fused planes
    when the prediction folder holds a ``fused.json``.
    """
    pred = read_layouts(pred_dir)
    gt = read_layouts(gt_dir)
    if view_ids is not None:
        pred = {k: v for k, v in pred.items() if k in set(view_ids)}
    missing = sorted(set(pred) - set(gt))
    if missing:
        raise DomainError(f"ground truth lacks views {missing}")
    for view_id, layout in pred.items():
        if layout.cam != gt[view_id].cam:
            raise DomainError(f"view {view_id}: prediction is {layout.cam.width}x{layout.cam.height}, ground truth is {gt[view_id].cam.width}x{gt[view_id].cam.height}")
    gt_depths = {k: d for k in pred if (d := read_depth(gt_dir, k)) is not None}
    structure = read_structure(gt_dir)
    pairs = [p for p in read_correspondences(gt_dir) if p.view_a in pred and p.view_b in pred]
    scene = read_scene_layout(pred_dir)
    pred_depths = {k: d for k in pred if (d := read_depth(pred_dir, k)) is not None}
    report = evaluate(pred, gt, gt_depths, structure, pairs, pred_depths=pred_depths, scene=scene)
    return report


def cmd_reconstruct(args) -> int:
    manifest = SceneManifest.load(args.manifest)
    config = resolve_config(args, manifest.config)
    if args.print_config:
        print(json.dumps(config, indent=1, sort_keys=True))
        return 0
    out = _output_dir(args, manifest)
    view_ids = [int(x) for x in args.views.split(",")] if args.views else None
    with stage("reconstruct"):
        summary = reconstruct(manifest, config, out, view_ids)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred_dir, args.gt_dir)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# --------------------------------------------------------------------------
# argument parsing


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panolayout", description="Multi-view panoramic layout reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="render a synthetic scene to disk")
    synth.add_argument("spec", help="scene JSON path or bundled fixture name (cuboid, two_room, clutter, textureless)")
    synth.add_argument("--out", help=f"scene directory (default: ${OUTPUT_ENV})")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-views", dest="n_views", type=int, help="sample this many random poses instead of the listed ones")
    synth.add_argument("--image-height", dest="image_height", type=_positive_int, help="panorama height in pixels")
    synth.set_defaults(func=cmd_synth)

    rec = sub.add_parser("reconstruct", help="estimate layout depths, fuse and evaluate")
    rec.add_argument("manifest", help="manifest.json or the scene directory holding it")
    rec.add_argument("--out", help=f"output directory (default: manifest output_dir, then ${OUTPUT_ENV})")
    rec.add_argument("--hyp-count", dest="hyp_count", type=_positive_int)
    rec.add_argument("--hyp-min", dest="hyp_min", type=float)
    rec.add_argument("--hyp-max", dest="hyp_max", type=float)
    rec.add_argument("--spacing", choices=("inverse", "uniform"))
    rec.add_argument("--temperature", type=float)
    rec.add_argument("--patch-size", dest="patch_size", type=_positive_int)
    rec.add_argument("--smoothing-size", dest="smoothing_size", type=_positive_int)
    rec.add_argument("--no-smoothing", dest="no_smoothing", action="store_true")
    rec.add_argument("--confidence", choices=CONFIDENCE_MODES)
    rec.add_argument("--fusion-threshold", dest="fusion_threshold", type=float, help=f"meters (default {FUSION_THRESHOLD})")
    rec.add_argument("--threads", type=_positive_int)
    rec.add_argument("--seed", type=int)
    rec.add_argument("--views", help="comma-separated view ids to use")
    rec.add_argument("--dump-probabilities", dest="dump_probabilities", action="store_const", const=True)
    rec.add_argument("--print-config", dest="print_config", action="store_true", help="print resolved settings and exit")
    rec.set_defaults(func=cmd_reconstruct)

    ev = sub.add_parser("eval", help="compare a prediction folder against ground truth")
    ev.add_argument("pred_dir")
    ev.add_argument("gt_dir")
    ev.add_argument("--out", help="also write the report JSON here")
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        log.error("%s", exc, extra={"error": "usage"})
        return 2
    except (DomainError, OSError, ValueError) as exc:
        log.error("%s", exc, extra={"error": type(exc).__name__})
        return 1


if __name__ == "__main__":
    sys.exit(main())
