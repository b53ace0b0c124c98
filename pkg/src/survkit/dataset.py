"""YOLO-format dataset handling: parse, validate, filter, remap, summarize.

On-disk layout: per subset a pair of parallel directories, one holding
images and one holding `.txt` label files that share the image basename.
Both common arrangements are auto-detected:

    root/<subset>/images + root/<subset>/labels
    root/images/<subset> + root/labels/<subset>

A label file holds one box per line: ``class_id cx cy w h`` with center
coordinates and sizes normalized to [0, 1].
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LabelParseError, ManifestError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")

# Fixed 6-decimal float output => byte-stable label files for diffing.
LABEL_DECIMALS = 6
_MICRO = 10**LABEL_DECIMALS


class Provenance(str, enum.Enum):
    ORIGINAL = "original"
    COMPOSITED = "composited"
    DEGRADED = "degraded"
    COMPOSITED_DEGRADED = "composited+degraded"


@dataclass(frozen=True)
class BBox:
    """One normalized YOLO box: class id plus center/size fractions.

    cx, cy lie in [0, 1] and w, h in (0, 1]. The extent cx ± w/2 may exceed
    the unit square transiently (mid-composite); anything written to disk is
    frame-contained.
    """

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError(f"negative class id: {self.class_id}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"center out of [0,1]: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"size out of (0,1]: ({self.w}, {self.h})")

    def to_pixel_rect(self, height: int, width: int) -> tuple[int, int, int, int]:
        """Half-open integer rect (x0, y0, x1, y1) in an H×W frame."""
        x0 = int(round((self.cx - self.w / 2.0) * width))
        x1 = int(round((self.cx + self.w / 2.0) * width))
        y0 = int(round((self.cy - self.h / 2.0) * height))
        y1 = int(round((self.cy + self.h / 2.0) * height))
        return x0, y0, x1, y1

    @classmethod
    def from_pixel_rect(
        cls, rect: tuple[float, float, float, float], height: int, width: int, class_id: int = 0
    ) -> "BBox":
        x0, y0, x1, y1 = rect
        return cls(
            class_id=class_id,
            cx=(x0 + x1) / 2.0 / width,
            cy=(y0 + y1) / 2.0 / height,
            w=(x1 - x0) / width,
            h=(y1 - y0) / height,
        )


def snap_to_unit_frame(box: BBox) -> BBox:
    """Quantize a box to the 6-decimal grid so the written line is frame-contained.

    Work in integer micro-units: after rounding cx and w independently the
    extent could poke past the frame by up to half a quantum, so w is clamped
    to 2·min(cx, 1−cx) (same for y) where all operands are already quantized.
    """
    mcx = round(box.cx * _MICRO)
    mcy = round(box.cy * _MICRO)
    mw = min(round(box.w * _MICRO), 2 * min(mcx, _MICRO - mcx))
    mh = min(round(box.h * _MICRO), 2 * min(mcy, _MICRO - mcy))
    if mw <= 0 or mh <= 0:
        raise ValueError(f"box collapses under quantization: {box}")
    return BBox(box.class_id, mcx / _MICRO, mcy / _MICRO, mw / _MICRO, mh / _MICRO)


@dataclass
class AnnotatedImage:
    """An image plus its boxes and provenance. Pixels load lazily."""

    image_id: str
    boxes: list[BBox]
    source_path: Path | None = None
    pixels: np.ndarray | None = None  # H×W×3 uint8
    provenance: Provenance = Provenance.ORIGINAL

    def load_pixels(self) -> np.ndarray:
        if self.pixels is None:
            if self.source_path is None:
                raise ValueError(f"{self.image_id}: no pixels and no source path")
            with Image.open(self.source_path) as im:
                self.pixels = np.asarray(im.convert("RGB"))
        return self.pixels

    @property
    def shape_hw(self) -> tuple[int, int]:
        px = self.load_pixels()
        return px.shape[0], px.shape[1]


# ---------------------------------------------------------------------------
# Label file text <-> boxes


@dataclass(frozen=True)
class LabelIssue:
    line_no: int
    line: str
    reason: str


def scan_label_text(text: str) -> tuple[list[BBox], list[LabelIssue]]:
    """Parse every line, collecting violations instead of raising.

    Shared by the strict/lenient parser and by validate_dataset's
    malformed-line counters.
    """
    boxes: list[BBox] = []
    issues: list[LabelIssue] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            issues.append(LabelIssue(line_no, raw, f"expected 5 fields, got {len(parts)}"))
            continue
        try:
            class_id = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            issues.append(LabelIssue(line_no, raw, "non-numeric field"))
            continue
        try:
            boxes.append(BBox(class_id, cx, cy, w, h))
        except ValueError as exc:
            issues.append(LabelIssue(line_no, raw, str(exc)))
    return boxes, issues


def parse_label_file(text: str, strict: bool = True) -> list[BBox]:
    """Boxes from one label file's content, in line order.

    Strict mode raises on the first violating line; lenient mode drops the
    offenders (use scan_label_text when the drop count matters).
    """
    boxes, issues = scan_label_text(text)
    if strict and issues:
        first = issues[0]
        raise LabelParseError(f"line {first.line_no}: {first.reason} ({first.line.strip()!r})")
    return boxes


def serialize_labels(boxes: list[BBox]) -> str:
    return "".join(
        f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n" for b in boxes
    )


def write_label_file(path: Path, boxes: list[BBox]) -> None:
    path.write_text(serialize_labels(boxes), encoding="utf-8")


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class SubsetPaths:
    images_dir: Path
    labels_dir: Path


@dataclass
class DatasetManifest:
    """Resolved dataset: subset name -> directories, plus the class list."""

    root: Path
    class_names: list[str]
    subsets: dict[str, SubsetPaths]

    def image_files(self, subset: str) -> list[Path]:
        paths = self.subsets[subset]
        out = [p for p in sorted(paths.images_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTENSIONS]
        return out

    def label_path_for(self, subset: str, image_path: Path) -> Path:
        return self.subsets[subset].labels_dir / (image_path.stem + ".txt")

    def pairs(self, subset: str) -> list[tuple[Path, Path]]:
        """(image, label) pairs sorted by basename; the label may not exist yet."""
        return [(img, self.label_path_for(subset, img)) for img in self.image_files(subset)]


MANIFEST_FILENAME = "manifest.json"


def load_manifest(path: Path) -> DatasetManifest:
    """Read a manifest JSON document.

    Schema: {"class_names": [...], "subsets": {"<name>": {"images": <dir>,
    "labels": <dir>}}}; directories are resolved relative to the document.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "subsets" not in doc:
        raise ManifestError(f"{path}: manifest must be an object with a 'subsets' field")
    base = path.parent
    subsets: dict[str, SubsetPaths] = {}
    for name, entry in doc["subsets"].items():
        try:
            images = base / entry["images"]
            labels = base / entry["labels"]
        except (TypeError, KeyError) as exc:
            raise ManifestError(f"{path}: subset {name!r} needs 'images' and 'labels'") from exc
        subsets[name] = SubsetPaths(images, labels)
    class_names = list(doc.get("class_names", []))
    return DatasetManifest(root=base, class_names=class_names, subsets=subsets)


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    doc = {
        "class_names": manifest.class_names,
        "subsets": {
            name: {
                "images": _relative_or_absolute(sp.images_dir, path.parent),
                "labels": _relative_or_absolute(sp.labels_dir, path.parent),
            }
            for name, sp in manifest.subsets.items()
        },
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _relative_or_absolute(p: Path, base: Path) -> str:
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def discover_dataset(root: Path, class_names: list[str] | None = None) -> DatasetManifest:
    """Build a manifest from a dataset root, trying both common layouts.

    A manifest.json at the root wins if present.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"dataset root is not a directory: {root}")
    manifest_path = root / MANIFEST_FILENAME
    if manifest_path.is_file():
        return load_manifest(manifest_path)

    subsets: dict[str, SubsetPaths] = {}
    if (root / "images").is_dir() and (root / "labels").is_dir():
        # root/images/<subset>, root/labels/<subset>
        for sub in sorted(p.name for p in (root / "images").iterdir() if p.is_dir()):
            subsets[sub] = SubsetPaths(root / "images" / sub, root / "labels" / sub)
        if not subsets:
            subsets["train"] = SubsetPaths(root / "images", root / "labels")
    else:
        # root/<subset>/images, root/<subset>/labels
        for sub in sorted(p.name for p in root.iterdir() if p.is_dir()):
            if (root / sub / "images").is_dir():
                subsets[sub] = SubsetPaths(root / sub / "images", root / sub / "labels")
    if not subsets:
        raise ManifestError(f"no YOLO-style subset directories found under {root}")
    return DatasetManifest(root=root, class_names=class_names or [], subsets=subsets)


def load_annotations(manifest: DatasetManifest, subset: str, strict: bool = True) -> list[AnnotatedImage]:
    """AnnotatedImages (pixels unloaded) for one subset; missing labels = no boxes."""
    out = []
    for img_path, lbl_path in manifest.pairs(subset):
        text = lbl_path.read_text(encoding="utf-8") if lbl_path.is_file() else ""
        try:
            boxes = parse_label_file(text, strict=strict)
        except LabelParseError as exc:
            raise LabelParseError(f"{lbl_path}: {exc}") from exc
        out.append(AnnotatedImage(image_id=img_path.stem, boxes=boxes, source_path=img_path))
    return out


# ---------------------------------------------------------------------------
# Operations


@dataclass
class RemapReport:
    kept_images: int = 0
    dropped_boxes: int = 0
    emptied_images: list[str] = field(default_factory=list)


def remap_single_class(
    images: list[AnnotatedImage],
    keep_class_ids: set[int],
    keep_empty: bool = False,
) -> tuple[list[AnnotatedImage], RemapReport]:
    """Keep only the wanted classes and collapse them onto class id 0.

    Images left without boxes are dropped (they add no positives to a
    single-class detector) unless keep_empty retains them as hard negatives;
    either way they are listed in the report.
    """
    if not keep_class_ids:
        raise ValueError("keep_class_ids is empty")
    report = RemapReport()
    kept: list[AnnotatedImage] = []
    for img in images:
        survivors = [replace(b, class_id=0) for b in img.boxes if b.class_id in keep_class_ids]
        report.dropped_boxes += len(img.boxes) - len(survivors)
        if not survivors:
            report.emptied_images.append(img.image_id)
            if not keep_empty:
                continue
        kept.append(replace(img, boxes=survivors))
    report.kept_images = len(kept)
    return kept, report


@dataclass(frozen=True)
class SplitRow:
    subset: str
    images: int
    instances: int
    percentage: int


@dataclass
class SplitStats:
    rows: list[SplitRow]
    total_images: int
    total_instances: int

    def as_text(self) -> str:
        width = max([len("subset")] + [len(r.subset) for r in self.rows])
        lines = [f"{'subset':<{width}}  {'images':>7}  {'instances':>9}  {'pct':>4}"]
        for r in self.rows:
            lines.append(f"{r.subset:<{width}}  {r.images:>7}  {r.instances:>9}  {r.percentage:>3}%")
        lines.append(f"{'total':<{width}}  {self.total_images:>7}  {self.total_instances:>9}  100%")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {
            "subsets": [vars(r) for r in self.rows],
            "total_images": self.total_images,
            "total_instances": self.total_instances,
        }


def split_stats(manifest: DatasetManifest) -> SplitStats:
    """Per-subset image/instance counts with rounded image-share percentages."""
    counts: list[tuple[str, int, int]] = []
    for subset in manifest.subsets:
        pairs = manifest.pairs(subset)
        instances = 0
        for _, lbl in pairs:
            if lbl.is_file():
                try:
                    instances += len(parse_label_file(lbl.read_text(encoding="utf-8")))
                except (OSError, LabelParseError) as exc:
                    raise ManifestError(f"unreadable label file {lbl}: {exc}") from exc
        counts.append((subset, len(pairs), instances))
    total_images = sum(c[1] for c in counts)
    total_instances = sum(c[2] for c in counts)
    rows = [
        SplitRow(name, n_img, n_inst, round(100 * n_img / total_images) if total_images else 0)
        for name, n_img, n_inst in counts
    ]
    return SplitStats(rows=rows, total_images=total_images, total_instances=total_instances)


@dataclass
class ValidationReport:
    orphan_images: list[str] = field(default_factory=list)
    orphan_labels: list[str] = field(default_factory=list)
    duplicate_ids: list[str] = field(default_factory=list)
    malformed_lines: dict[str, int] = field(default_factory=dict)
    schema_warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.orphan_images
            or self.orphan_labels
            or self.duplicate_ids
            or any(self.malformed_lines.values())
        )

    @property
    def clean(self) -> bool:
        return self.ok and not self.schema_warnings

    def as_text(self) -> str:
        lines = []
        for name, entries in (
            ("orphan images (no label file)", self.orphan_images),
            ("orphan labels (no image)", self.orphan_labels),
            ("duplicate image ids", self.duplicate_ids),
            ("schema warnings", self.schema_warnings),
        ):
            lines.append(f"{name}: {len(entries)}")
            lines.extend(f"  - {e}" for e in entries)
        lines.append("malformed label lines per subset:")
        for subset, n in self.malformed_lines.items():
            lines.append(f"  - {subset}: {n}")
        lines.append("status: " + ("OK" if self.ok else "FAILED"))
        return "\n".join(lines)


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Cross-check images against labels; never repairs, only reports."""
    report = ValidationReport()
    seen_ids: dict[str, str] = {}
    n_classes = len(manifest.class_names)
    for subset, paths in manifest.subsets.items():
        if not paths.images_dir.is_dir():
            raise ManifestError(f"unreadable images directory: {paths.images_dir}")
        images = manifest.image_files(subset)
        label_stems = (
            {p.stem for p in paths.labels_dir.glob("*.txt")} if paths.labels_dir.is_dir() else set()
        )
        image_stems = set()
        malformed = 0
        for img in images:
            if img.stem in seen_ids:
                report.duplicate_ids.append(f"{subset}/{img.stem} (also in {seen_ids[img.stem]})")
            else:
                seen_ids[img.stem] = subset
            image_stems.add(img.stem)
            lbl = manifest.label_path_for(subset, img)
            if not lbl.is_file():
                report.orphan_images.append(f"{subset}/{img.name}")
                continue
            boxes, issues = scan_label_text(lbl.read_text(encoding="utf-8"))
            malformed += len(issues)
            if n_classes:
                for b in boxes:
                    if b.class_id >= n_classes:
                        report.schema_warnings.append(
                            f"{subset}/{lbl.name}: class id {b.class_id} >= {n_classes} declared classes"
                        )
        for stem in sorted(label_stems - image_stems):
            report.orphan_labels.append(f"{subset}/{stem}.txt")
        report.malformed_lines[subset] = malformed
    return report
