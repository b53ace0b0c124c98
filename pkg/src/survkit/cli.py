"""Command-line entry point.

    survkit validate     check a YOLO dataset tree for structural problems
    survkit stats        per-subset image/instance counts
    survkit cutouts      build a sprite bank from labeled boxes
    survkit augment      run a ratio-driven augmentation plan
    survkit slice-infer  sliced inference through a detector backend
    survkit eval         score detections against ground truth
    survkit report       re-render a saved augmentation report

Progress and logs go to stderr; machine-readable artifacts go to files, so
stdout stays clean for piping. Exit codes: 0 success, 1 domain failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import PIL
from PIL import Image

from . import __version__
from .backends import ExternalBackend, MyopicBackend, MyopicDetectorSpec
from .compositor import DEFAULT_FEATHER_PX, CutoutBank, build_cutout_bank
from .dataset import (
    discover_dataset,
    load_annotations,
    load_manifest,
    split_stats,
    validate_dataset,
)
from .errors import PlanError, SurvkitError
from .evaluation import DEFAULT_SCORE_CUTOFF, evaluate
from .planner import (
    AugmentOptions,
    AugmentReport,
    StrategyTally,
    build_plan,
    execute_plan,
    parse_ratio_config,
    report_stats,
)
from .slicer import (
    compute_slice_grid,
    detections_from_json,
    detections_to_json,
    sliced_inference,
)

log = logging.getLogger("survkit")


def _open_dataset(args, parser: argparse.ArgumentParser):
    root = Path(args.dataset)
    if not root.exists():
        parser.error(f"dataset path does not exist: {root}")
    if root.is_file():
        return load_manifest(root)
    return discover_dataset(root)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _setting(args, config: dict, name: str, default):
    """Flag wins over config file wins over default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return config.get(name, default)


# ---------------------------------------------------------------------------


def cmd_validate(args, parser) -> int:
    manifest = _open_dataset(args, parser)
    report = validate_dataset(manifest)
    print(report.as_text())
    failed = not report.ok or (args.strict and not report.clean)
    return 1 if failed else 0


def cmd_stats(args, parser) -> int:
    manifest = _open_dataset(args, parser)
    stats = split_stats(manifest)
    print(stats.as_text())
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(stats.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    return 0


def cmd_cutouts(args, parser) -> int:
    manifest = _open_dataset(args, parser)
    images = load_annotations(manifest, args.subset, strict=not args.lenient)
    masks_dir = Path(args.masks) if args.masks else None
    saved, skipped = build_cutout_bank(
        images,
        Path(args.out),
        mask_mode=args.mask_mode,
        feather=args.feather,
        masks_dir=masks_dir,
        limit=args.limit,
    )
    log.info("saved %d cutouts (%d boxes skipped) to %s", saved, skipped, args.out)
    if saved == 0:
        raise SurvkitError("no usable cutouts were extracted")
    return 0


def cmd_augment(args, parser) -> int:
    config = _load_config_file(args.config)
    manifest = _open_dataset(args, parser)
    ratios_text = _setting(args, config, "ratios", None)
    if not ratios_text:
        parser.error("--ratios is required")
    try:
        ratios = parse_ratio_config(ratios_text)
    except PlanError as exc:  # malformed ratio string is a usage error
        parser.error(str(exc))
    subset = _setting(args, config, "subset", "train")
    out_root = Path(args.out)

    cutouts_dir = _setting(args, config, "cutouts", None)
    bank = None
    if cutouts_dir:
        bank = CutoutBank(Path(cutouts_dir))
    elif args.build_cutouts:
        bank_dir = out_root / "cutout_bank"
        images = load_annotations(manifest, subset)
        saved, skipped = build_cutout_bank(images, bank_dir, feather=args.feather or DEFAULT_FEATHER_PX)
        log.info("built cutout bank: %d sprites (%d skipped)", saved, skipped)
        bank = CutoutBank(bank_dir)

    options = AugmentOptions(
        rotation_range_deg=float(_setting(args, config, "rotation_range_deg", 15.0)),
        gain_clamp=tuple(config.get("gain_clamp", (0.5, 2.0))),
        noise_coeff=float(_setting(args, config, "noise_coeff", 0.05)),
        placement_attempts=int(config.get("placement_attempts", 50)),
        child_retries=int(config.get("child_retries", 8)),
        degradation_ranges=config.get("degradation_ranges"),
    )
    if "instance_ranges" in config:
        options.instance_ranges = {k: tuple(v) for k, v in config["instance_ranges"].items()}

    workers = _setting(args, config, "workers", os.cpu_count() or 1)
    plan = build_plan(manifest, ratios, args.seed, subset=subset)
    out_manifest, report = execute_plan(
        plan, manifest, out_root, bank=bank, options=options, subset=subset, workers=int(workers)
    )
    plan.save(out_root / "plan.json")
    report.save(out_root / "report.json")
    doc, text = report_stats(report)
    log.info("augment finished\n%s", text)
    # The output path is deliberately left out so two runs of the same config
    # into different directories produce byte-identical trees.
    run_doc = {
        "command": "augment",
        "dataset": str(args.dataset),
        "seed": args.seed,
        "ratios": ratios.ratio_string(),
        "subset": subset,
        "options": {
            "rotation_range_deg": options.rotation_range_deg,
            "gain_clamp": list(options.gain_clamp),
            "noise_coeff": options.noise_coeff,
            "placement_attempts": options.placement_attempts,
            "child_retries": options.child_retries,
            "instance_ranges": {k: list(v) for k, v in options.instance_ranges.items()},
        },
        "versions": {
            "survkit": __version__,
            "numpy": np.__version__,
            "pillow": PIL.__version__,
        },
    }
    (out_root / "run.json").write_text(
        json.dumps(run_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return 0


def _build_backend(args, gts):
    if args.backend_cmd:
        return ExternalBackend(args.backend_cmd, timeout=args.timeout, transfer=args.transfer)
    if args.myopic_theta is not None:
        spec = MyopicDetectorSpec(
            ground_truth=gts,
            visibility_threshold=args.myopic_theta,
            score_noise=args.myopic_score_noise,
            miss_prob=args.myopic_miss_prob,
        )
        return MyopicBackend(spec, seed=args.seed or 0)
    return None


def cmd_slice_infer(args, parser) -> int:
    manifest = _open_dataset(args, parser)
    subset = args.subset
    if subset not in manifest.subsets:
        parser.error(f"subset {subset!r} not found in dataset")
    annotations = load_annotations(manifest, subset)

    gts: dict[str, list[tuple[float, float, float, float]]] = {}
    for ann in annotations:
        h, w = ann.shape_hw
        gts[ann.image_id] = [tuple(map(float, b.to_pixel_rect(h, w))) for b in ann.boxes]

    backend = _build_backend(args, gts)
    if backend is None:
        parser.error("one of --backend-cmd / --myopic-theta is required")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {
        "size_ratio": args.size_ratio,
        "overlap": args.overlap,
        "iou_threshold": args.iou_threshold,
        "full_frame": not args.no_full_frame,
    }
    started = time.monotonic()
    slice_counts: dict[str, int] = {}
    try:
        if isinstance(backend, ExternalBackend):
            backend.start()
        for ann in annotations:
            pixels = ann.load_pixels()
            grid = compute_slice_grid(pixels.shape[0], pixels.shape[1], args.size_ratio, args.overlap)
            slice_counts[ann.image_id] = len(grid.slices)
            dets = sliced_inference(
                pixels,
                backend,
                size_ratio=args.size_ratio,
                overlap=args.overlap,
                iou_threshold=args.iou_threshold,
                include_full_frame=not args.no_full_frame,
                image_id=ann.image_id,
            )
            doc = detections_to_json(ann.image_id, pixels.shape[:2], dets, params)
            (out_dir / f"{ann.image_id}.json").write_text(
                json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )
            ann.pixels = None  # keep memory flat over large sets
    finally:
        if isinstance(backend, ExternalBackend):
            backend.close()
    summary = {
        "images": len(annotations),
        "params": params,
        "slice_counts": slice_counts,
        "elapsed_sec": round(time.monotonic() - started, 3),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    log.info("slice-infer wrote %d detection files to %s", len(annotations), out_dir)
    return 0


def cmd_eval(args, parser) -> int:
    manifest = _open_dataset(args, parser)
    subset = args.subset
    if subset not in manifest.subsets:
        parser.error(f"subset {subset!r} not found in dataset")
    gts: dict[str, list[tuple[float, float, float, float]]] = {}
    for ann in load_annotations(manifest, subset):
        with Image.open(ann.source_path) as im:
            w, h = im.size
        gts[ann.image_id] = [tuple(map(float, b.to_pixel_rect(h, w))) for b in ann.boxes]

    det_dir = Path(args.detections)
    if not det_dir.is_dir():
        parser.error(f"detections directory does not exist: {det_dir}")
    dets = {}
    for path in sorted(det_dir.glob("*.json")):
        if path.name == "summary.json":
            continue
        image_id, image_dets = detections_from_json(json.loads(path.read_text(encoding="utf-8")))
        dets[image_id] = image_dets

    report = evaluate(dets, gts, score_cutoff=args.score_cutoff)
    print(report.as_text())
    if args.out:
        report.save(Path(args.out))
    return 0


def cmd_report(args, parser) -> int:
    doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
    report = AugmentReport(
        ratio_string=doc["ratio_string"],
        seed=doc["seed"],
        original_images=doc["original_images"],
        original_objects=doc["original_objects"],
        per_strategy={k: StrategyTally(**v) for k, v in doc["per_strategy"].items()},
        expected_counts=doc.get("expected_counts", {}),
    )
    _, text = report_stats(report)
    print(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survkit", description=__doc__.split("\n\n")[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check dataset structure")
    p.add_argument("--dataset", required=True, help="dataset root or manifest.json")
    p.add_argument("--strict", action="store_true", help="fail on schema warnings too")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="per-subset image/instance counts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--json-out", help="also write the table as JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("cutouts", help="extract a sprite bank")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subset", default="train")
    p.add_argument("--feather", type=int, default=DEFAULT_FEATHER_PX)
    p.add_argument("--mask-mode", choices=["feathered_rect", "external_mask"], default="feathered_rect")
    p.add_argument("--masks", help="directory of external masks (<image>_<i>.png)")
    p.add_argument("--limit", type=int)
    p.add_argument("--lenient", action="store_true", help="drop malformed label lines instead of failing")
    p.set_defaults(func=cmd_cutouts)

    p = sub.add_parser("augment", help="run a ratio-driven augmentation plan")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", help='"train - overlap - edge - none - noise - light"')
    p.add_argument("--seed", type=int, required=True, help="mandatory: runs must be reproducible")
    p.add_argument("--cutouts", help="existing cutout bank directory")
    p.add_argument("--build-cutouts", action="store_true", help="extract the bank from the train subset first")
    p.add_argument("--subset")
    p.add_argument("--workers", type=int)
    p.add_argument("--rotation-range-deg", type=float, dest="rotation_range_deg")
    p.add_argument("--noise-coeff", type=float, dest="noise_coeff")
    p.add_argument("--feather", type=int)
    p.add_argument("--config", help="JSON config file; explicit flags win")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("slice-infer", help="sliced inference through a backend")
    p.add_argument("--dataset", required=True)
    p.add_argument("--subset", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--backend-cmd", help="external backend command line (stdio JSON protocol)")
    p.add_argument("--myopic-theta", type=float, help="use the built-in myopic backend at this visibility threshold")
    p.add_argument("--myopic-score-noise", type=float, default=0.0)
    p.add_argument("--myopic-miss-prob", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size-ratio", type=float, default=0.5, help="slice size as a fraction of min(H, W)")
    p.add_argument("--overlap", type=float, default=0.2, help="slice overlap ratio in [0, 0.5]")
    p.add_argument("--iou-threshold", type=float, default=0.5, help="NMS merge threshold")
    p.add_argument("--no-full-frame", action="store_true", help="skip the whole-image pass")
    p.add_argument("--transfer", choices=["path", "base64"], default="path")
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_slice_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--detections", required=True, help="directory of per-image detection JSON files")
    p.add_argument("--dataset", required=True)
    p.add_argument("--subset", default="test")
    p.add_argument("--score-cutoff", type=float, default=DEFAULT_SCORE_CUTOFF)
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render a saved augmentation report")
    p.add_argument("--report", required=True, help="report.json from an augment run")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, parser)
    except SurvkitError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
