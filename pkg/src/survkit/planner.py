"""Ratio-driven augmentation planning and execution.

A ratio string "train - overlap - edge - none - noise - light" (the "none"
position is the neutral center placement) is turned into a deterministic
plan: for each strategy with ratio r, floor(N·r) distinct training images
are drawn without replacement, where N is the retained original count.
Draws are independent per placement strategy (one source may serve several),
while the noise and light pools are kept disjoint from each other, so each
image receives at most one degradation family.

Execution is reproducible byte-for-byte: every assignment consumes its own
random stream derived from (seed, output id), so worker count and execution
order cannot change the output tree.
"""

from __future__ import annotations

import json
import math
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from io import BytesIO
from pathlib import Path

from PIL import Image

from ._rng import derive_rng
from .compositor import (
    CutoutBank,
    blend_composite,
    place_center,
    place_edge,
    place_overlap,
    rotate_cutout,
    sample_scale,
)
from .dataset import (
    AnnotatedImage,
    DatasetManifest,
    Provenance,
    SubsetPaths,
    load_annotations,
    save_manifest,
    serialize_labels,
    snap_to_unit_frame,
)
from .degradations import apply_bundle
from .errors import BlendError, CutoutError, PlacementFailed, PlanError

PLACEMENT_STRATEGIES = ("overlap", "edge", "center")
DEGRADATION_STRATEGIES = ("noise", "light")
ALL_STRATEGIES = PLACEMENT_STRATEGIES + DEGRADATION_STRATEGIES


@dataclass(frozen=True)
class RatioConfig:
    train: float
    overlap: float
    edge: float
    center: float
    noise: float
    light: float

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"ratio {name}={value} outside [0, 1]")

    def ratio_string(self) -> str:
        return " - ".join(
            _trim(v) for v in (self.train, self.overlap, self.edge, self.center, self.noise, self.light)
        )


def _trim(v: float) -> str:
    return f"{v:g}"


def parse_ratio_config(text: str) -> RatioConfig:
    """Parse "train - overlap - edge - none - noise - light" (whitespace free-form)."""
    parts = [p.strip() for p in text.split("-")]
    if len(parts) != 6:
        raise PlanError(
            f"ratio string needs 6 dash-separated values "
            f'(e.g. "1 - 0.1 - 0.1 - 0.3 - 0.25 - 0.25"), got {len(parts)}: {text!r}'
        )
    try:
        values = [float(p) for p in parts]
    except ValueError as exc:
        raise PlanError(f"non-numeric ratio in {text!r}: {exc}") from exc
    try:
        return RatioConfig(*values)
    except ValueError as exc:
        raise PlanError(str(exc)) from exc


@dataclass(frozen=True)
class Assignment:
    source_image_id: str
    strategy: str
    output_image_id: str


@dataclass
class AugmentationPlan:
    seed: int
    ratios: RatioConfig
    retained: list[str]
    assignments: list[Assignment]
    expected_counts: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ratios": asdict(self.ratios),
            "retained": self.retained,
            "assignments": [asdict(a) for a in self.assignments],
            "expected_counts": self.expected_counts,
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _floor_ratio(n: int, ratio: float) -> int:
    # Fraction(str(r)) keeps 0.1 exactly one tenth: floor(2289 * 0.3) must be
    # 686, never bitten by binary float representation.
    return int(math.floor(n * Fraction(str(ratio))))


def build_plan(
    manifest: DatasetManifest,
    config: RatioConfig,
    seed: int,
    subset: str = "train",
) -> AugmentationPlan:
    """Seeded source selection: floor(N·r) distinct images per strategy."""
    if subset not in manifest.subsets:
        raise PlanError(f"subset {subset!r} not in manifest ({sorted(manifest.subsets)})")
    source_ids = sorted(p.stem for p in manifest.image_files(subset))
    if not source_ids:
        raise PlanError(f"subset {subset!r} has no images")
    rng = derive_rng(seed, "plan")

    n_retained = _floor_ratio(len(source_ids), config.train)
    retained = sorted(
        source_ids[i] for i in rng.choice(len(source_ids), size=n_retained, replace=False)
    )
    if not retained:
        raise PlanError("train ratio retained zero images")

    assignments: list[Assignment] = []
    expected: dict[str, int] = {}
    degraded_already: set[str] = set()
    for strategy in ALL_STRATEGIES:
        ratio = getattr(config, strategy)
        count = _floor_ratio(len(retained), ratio)
        expected[strategy] = count
        if count == 0:
            continue
        if strategy in DEGRADATION_STRATEGIES:
            pool = [s for s in retained if s not in degraded_already]
        else:
            pool = retained
        if count > len(pool):
            raise PlanError(
                f"strategy {strategy!r} needs {count} images but only {len(pool)} are available "
                f"(noise/light pools are disjoint)"
            )
        chosen = sorted(pool[i] for i in rng.choice(len(pool), size=count, replace=False))
        if strategy in DEGRADATION_STRATEGIES:
            degraded_already.update(chosen)
        assignments.extend(
            Assignment(source_image_id=s, strategy=strategy, output_image_id=f"{s}__{strategy}")
            for s in chosen
        )
    return AugmentationPlan(
        seed=seed, ratios=config, retained=retained, assignments=assignments, expected_counts=expected
    )


# ---------------------------------------------------------------------------
# Execution


@dataclass
class AugmentOptions:
    instance_ranges: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {"overlap": (1, 3), "edge": (1, 3), "center": (2, 4)}
    )
    rotation_range_deg: float = 15.0
    gain_clamp: tuple[float, float] = (0.5, 2.0)
    noise_coeff: float = 0.05
    placement_attempts: int = 50
    child_retries: int = 8
    degradation_ranges: dict | None = None


@dataclass
class StrategyTally:
    images: int = 0
    added_objects: int = 0
    redraws: int = 0


@dataclass
class AugmentReport:
    ratio_string: str
    seed: int
    original_images: int
    original_objects: int
    per_strategy: dict[str, StrategyTally]
    expected_counts: dict[str, int]

    @property
    def added_objects(self) -> int:
        return sum(t.added_objects for t in self.per_strategy.values())

    @property
    def augmented_images(self) -> int:
        return sum(t.images for t in self.per_strategy.values())

    @property
    def final_images(self) -> int:
        return self.original_images + self.augmented_images

    @property
    def final_objects(self) -> int:
        # Degradations copy labels byte-for-byte; only composited instances
        # count as new objects.
        return self.original_objects + self.added_objects

    def as_dict(self) -> dict:
        return {
            "ratio_string": self.ratio_string,
            "seed": self.seed,
            "original_images": self.original_images,
            "original_objects": self.original_objects,
            "per_strategy": {k: asdict(v) for k, v in self.per_strategy.items()},
            "expected_counts": self.expected_counts,
            "final_images": self.final_images,
            "final_objects": self.final_objects,
        }

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def report_stats(report: AugmentReport) -> tuple[dict, str]:
    """Machine-readable dict plus an aligned text rendering of the run."""
    doc = report.as_dict()
    lines = [
        "augmentation overview",
        f"  original images:  {report.original_images}",
        f"  original objects: {report.original_objects}",
        f"  ratios:           {report.ratio_string}",
        f"  final images:     {report.final_images}",
        f"  final objects:    {report.final_objects}",
        "",
        "per-strategy breakdown",
        f"  {'strategy':<10} {'images':>7} {'added objects':>14} {'redraws':>8}",
    ]
    for strategy in ALL_STRATEGIES:
        tally = report.per_strategy.get(strategy, StrategyTally())
        lines.append(
            f"  {strategy:<10} {tally.images:>7} {tally.added_objects:>14} {tally.redraws:>8}"
        )
    return doc, "\n".join(lines)


@dataclass
class _OutputRecord:
    output_id: str
    png_bytes: bytes
    label_bytes: bytes  # degraded outputs byte-copy their source label file
    sidecar: dict
    added_objects: int
    redraws: int
    strategy: str


def _png_bytes(pixels) -> bytes:
    buf = BytesIO()
    Image.fromarray(pixels).save(buf, format="PNG")
    return buf.getvalue()


def _composite_one(
    source: AnnotatedImage,
    strategy: str,
    output_id: str,
    bank: CutoutBank,
    seed: int,
    options: AugmentOptions,
) -> tuple[AnnotatedImage, dict]:
    """Composite U{lo..hi} children onto one frame; raises PlacementFailed
    if any child cannot be placed within the retry budget."""
    rng = derive_rng(seed, "composite", output_id)
    lo, hi = options.instance_ranges[strategy]
    n_children = int(rng.integers(lo, hi + 1))
    image = replace(source, pixels=source.load_pixels().copy(), boxes=list(source.boxes))
    frame_hw = image.pixels.shape[:2]
    children_meta = []
    for child_index in range(n_children):
        last_error: Exception | None = None
        for _ in range(options.child_retries):
            try:
                cutout_id, cutout = bank.sample(rng)
                angle = float(rng.uniform(-options.rotation_range_deg, options.rotation_range_deg))
                rotated = rotate_cutout(cutout, angle, options.rotation_range_deg)
                scale, fallback = sample_scale(image.boxes, frame_hw, rotated.size_hw, rng)
                sprite_hw = (
                    max(1, round(rotated.size_hw[0] * scale)),
                    max(1, round(rotated.size_hw[1] * scale)),
                )
                if strategy == "overlap":
                    placement = place_overlap(
                        image.boxes, sprite_hw, frame_hw, rng, options.placement_attempts
                    )
                elif strategy == "edge":
                    placement = place_edge(sprite_hw, frame_hw, rng, options.placement_attempts)
                else:
                    placement = place_center(sprite_hw, frame_hw, rng)
                placement = replace(placement, rotation_deg=angle, scale=scale)
                image = blend_composite(
                    image,
                    rotated,
                    placement,
                    rng,
                    gain_clamp=options.gain_clamp,
                    noise_coeff=options.noise_coeff,
                )
            except (PlacementFailed, CutoutError, BlendError) as exc:
                last_error = exc
                continue
            children_meta.append(
                {
                    "cutout_id": cutout_id,
                    "rect": list(placement.rect),
                    "rotation_deg": angle,
                    "scale": scale,
                    "scale_fallback": fallback,
                }
            )
            break
        else:
            raise PlacementFailed(
                f"{output_id}: child {child_index + 1}/{n_children} unplaceable ({last_error})"
            )
    sidecar = {
        "strategy": strategy,
        "source_image_id": source.image_id,
        "provenance": Provenance.COMPOSITED.value,
        "children": children_meta,
    }
    return image, sidecar


def _degrade_one(
    source: AnnotatedImage,
    family: str,
    output_id: str,
    seed: int,
    options: AugmentOptions,
) -> tuple[bytes, dict]:
    rng = derive_rng(seed, "degrade", output_id)
    degraded, specs = apply_bundle(source.load_pixels(), family, rng, options.degradation_ranges)
    sidecar = {
        "strategy": family,
        "source_image_id": source.image_id,
        "provenance": Provenance.DEGRADED.value,
        "applied": [spec.as_dict() for spec in specs],
    }
    return _png_bytes(degraded), sidecar


def execute_plan(
    plan: AugmentationPlan,
    manifest: DatasetManifest,
    out_root: Path,
    bank: CutoutBank | None = None,
    options: AugmentOptions | None = None,
    subset: str = "train",
    workers: int = 1,
) -> tuple[DatasetManifest, AugmentReport]:
    """Materialize the plan into a new dataset tree.

    Output layout is always <out_root>/<subset>/{images,labels}; untouched
    subsets are byte-copied through. An assignment whose source defeats the
    placement budget is re-drawn from sources the strategy did not already
    use (deterministic per-slot order) and counted as a redraw.
    """
    options = options or AugmentOptions()
    out_root = Path(out_root)
    needs_bank = any(a.strategy in PLACEMENT_STRATEGIES for a in plan.assignments)
    if needs_bank and (bank is None or len(bank) == 0):
        raise PlanError("plan needs composites but the cutout bank is empty")

    annotations = {a.image_id: a for a in load_annotations(manifest, subset)}
    missing = [s for s in plan.retained if s not in annotations]
    if missing:
        raise PlanError(f"plan references images missing from the dataset: {missing[:5]}")

    out_subsets: dict[str, SubsetPaths] = {}
    for name in manifest.subsets:
        sp = SubsetPaths(out_root / name / "images", out_root / name / "labels")
        sp.images_dir.mkdir(parents=True, exist_ok=True)
        sp.labels_dir.mkdir(parents=True, exist_ok=True)
        out_subsets[name] = sp
        if name != subset:
            for img_path, lbl_path in manifest.pairs(name):
                shutil.copyfile(img_path, sp.images_dir / img_path.name)
                if lbl_path.is_file():
                    shutil.copyfile(lbl_path, sp.labels_dir / lbl_path.name)
                else:
                    (sp.labels_dir / lbl_path.name).touch()

    # Originals pass through untouched (byte copies keep determinism trivial).
    train_out = out_subsets[subset]
    original_objects = 0
    for source_id in plan.retained:
        ann = annotations[source_id]
        original_objects += len(ann.boxes)
        shutil.copyfile(ann.source_path, train_out.images_dir / ann.source_path.name)
        lbl = manifest.label_path_for(subset, ann.source_path)
        if lbl.is_file():
            shutil.copyfile(lbl, train_out.labels_dir / (source_id + ".txt"))
        else:
            (train_out.labels_dir / (source_id + ".txt")).touch()

    assigned_by_strategy: dict[str, set[str]] = {s: set() for s in ALL_STRATEGIES}
    for a in plan.assignments:
        assigned_by_strategy[a.strategy].add(a.source_image_id)

    def run_slot(slot_index: int) -> _OutputRecord:
        assignment = plan.assignments[slot_index]
        strategy = assignment.strategy
        candidates = [assignment.source_image_id]
        if strategy in PLACEMENT_STRATEGIES:
            spare = [s for s in plan.retained if s not in assigned_by_strategy[strategy]]
            order = derive_rng(plan.seed, "redraw", strategy, assignment.output_image_id).permutation(
                len(spare)
            )
            candidates += [spare[i] for i in order]
        last_error: Exception | None = None
        for attempt, source_id in enumerate(candidates):
            source = annotations[source_id]
            output_id = (
                assignment.output_image_id
                if attempt == 0
                else f"{source_id}__{strategy}_r{slot_index}"
            )
            try:
                if strategy in PLACEMENT_STRATEGIES:
                    image, sidecar = _composite_one(source, strategy, output_id, bank, plan.seed, options)
                    # Every line written here must be frame-contained after
                    # 6-decimal quantization, source boxes included.
                    snapped = [snap_to_unit_frame(b) for b in image.boxes]
                    record = _OutputRecord(
                        output_id=output_id,
                        png_bytes=_png_bytes(image.pixels),
                        label_bytes=serialize_labels(snapped).encode("utf-8"),
                        sidecar=sidecar,
                        added_objects=len(image.boxes) - len(source.boxes),
                        redraws=attempt,
                        strategy=strategy,
                    )
                else:
                    lbl = manifest.label_path_for(subset, source.source_path)
                    png, sidecar = _degrade_one(source, strategy, output_id, plan.seed, options)
                    record = _OutputRecord(
                        output_id=output_id,
                        png_bytes=png,
                        label_bytes=lbl.read_bytes() if lbl.is_file() else b"",
                        sidecar=sidecar,
                        added_objects=0,
                        redraws=attempt,
                        strategy=strategy,
                    )
                return record
            except (PlacementFailed, CutoutError, BlendError) as exc:
                last_error = exc
        raise PlanError(f"slot {slot_index} ({assignment.output_image_id}): every source failed: {last_error}")

    if workers > 1 and plan.assignments:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run_slot, range(len(plan.assignments))))
    else:
        records = [run_slot(i) for i in range(len(plan.assignments))]

    tallies = {s: StrategyTally() for s in ALL_STRATEGIES}
    for record in records:  # single-threaded writes in slot order => stable tree
        (train_out.images_dir / f"{record.output_id}.png").write_bytes(record.png_bytes)
        (train_out.labels_dir / f"{record.output_id}.txt").write_bytes(record.label_bytes)
        (train_out.images_dir / f"{record.output_id}.json").write_text(
            json.dumps(record.sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        tally = tallies[record.strategy]
        tally.images += 1
        tally.added_objects += record.added_objects
        tally.redraws += record.redraws

    out_manifest = DatasetManifest(
        root=out_root, class_names=manifest.class_names, subsets=out_subsets
    )
    save_manifest(out_manifest, out_root / "manifest.json")
    report = AugmentReport(
        ratio_string=plan.ratios.ratio_string(),
        seed=plan.seed,
        original_images=len(plan.retained),
        original_objects=original_objects,
        per_strategy=tallies,
        expected_counts=plan.expected_counts,
    )
    return out_manifest, report
