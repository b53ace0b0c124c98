"""Slicing-aided inference.

An image is covered by overlapping S×S slices with S derived from the frame
size (S = round(min(H, W) · r)) and the stride from the overlap ratio
(stride = round(S · (1 − γ))). A detector backend runs on every slice (and,
by default, on the full frame), per-slice detections are translated back to
frame coordinates, pooled, and merged with greedy IoU-threshold NMS.

Slices near the far border shift back instead of shrinking, so the backend
always sees a constant S×S input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .errors import BackendError

if TYPE_CHECKING:  # pragma: no cover - import cycle guard for typing only
    from .backends import DetectorBackend

Rect = tuple[float, float, float, float]

FULL_FRAME = "full_frame"


@dataclass(frozen=True)
class Detection:
    """A pixel-space box with score and class, tagged with its origin view."""

    box: Rect  # x0, y0, x1, y1 in the original frame after remapping
    score: float
    class_id: int = 0
    origin: str = FULL_FRAME  # FULL_FRAME or "slice:<index>"

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.box[2] - self.box[0]) * (self.box[3] - self.box[1])


@dataclass(frozen=True)
class SliceGrid:
    height: int
    width: int
    slice_size: int
    overlap: float
    slices: tuple[tuple[int, int, int, int], ...]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _axis_origins(dim: int, size: int, stride: int) -> list[int]:
    origins: list[int] = []
    o = 0
    while True:
        clamped = min(o, dim - size)
        if not origins or clamped != origins[-1]:
            origins.append(clamped)
        if clamped == dim - size:
            return origins
        o += stride


def compute_slice_grid(height: int, width: int, size_ratio: float, overlap: float) -> SliceGrid:
    """Slice rectangles covering an H×W frame.

    size_ratio r ∈ (0, 1] sets S = round(min(H, W) · r); overlap γ ∈ [0, 0.5]
    sets the stride. Every pixel is covered and every slice is exactly S×S.
    """
    if not 0.0 < size_ratio <= 1.0:
        raise ValueError(f"size ratio must be in (0, 1], got {size_ratio}")
    if not 0.0 <= overlap <= 0.5:
        raise ValueError(f"overlap must be in [0, 0.5], got {overlap}")
    if height < 1 or width < 1:
        raise ValueError(f"bad frame {width}×{height}")
    size = _round_half_up(min(height, width) * size_ratio)
    if size < 1:
        raise ValueError(f"slice size {size} < 1 (ratio {size_ratio} too small for the frame)")
    stride = max(1, _round_half_up(size * (1.0 - overlap)))
    xs = _axis_origins(width, size, stride)
    ys = _axis_origins(height, size, stride)
    slices = tuple((x, y, x + size, y + size) for y in ys for x in xs)
    return SliceGrid(height=height, width=width, slice_size=size, overlap=overlap, slices=slices)


def remap_detection(slice_rect: tuple[int, int, int, int], det: Detection, slice_index: int) -> Detection:
    """Translate a slice-local detection into original-frame coordinates."""
    sx0, sy0, sx1, sy1 = slice_rect
    x0, y0, x1, y1 = det.box
    if x0 < 0 or y0 < 0 or x1 > sx1 - sx0 or y1 > sy1 - sy0:
        raise ValueError(f"detection {det.box} outside its {sx1 - sx0}×{sy1 - sy0} slice")
    return replace(det, box=(x0 + sx0, y0 + sy0, x1 + sx0, y1 + sy0), origin=f"slice:{slice_index}")


def iou(a: Rect, b: Rect) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    if area_a <= 0 or area_b <= 0:
        raise ValueError(f"zero-area rect: {a if area_a <= 0 else b}")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def _canonical_order(dets: list[Detection]) -> list[Detection]:
    # Score descending; ties by smaller area, then by coordinates, so the
    # result does not depend on input permutation.
    return sorted(dets, key=lambda d: (-d.score, d.area, d.box))


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy hard suppression: keep the best, drop anything at IoU >= τ.

    The kept set satisfies pairwise IoU < τ.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"IoU threshold must be in [0, 1], got {iou_threshold}")
    remaining = _canonical_order(dets)
    kept: list[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if iou(best.box, d.box) < iou_threshold]
    return kept


def sliced_inference(
    pixels: np.ndarray,
    backend: "DetectorBackend",
    size_ratio: float = 0.5,
    overlap: float = 0.2,
    iou_threshold: float = 0.5,
    include_full_frame: bool = True,
    image_id: str | None = None,
) -> list[Detection]:
    """Detect on every slice (and optionally the full frame), remap, merge.

    A backend failure on any view aborts with that view identified; partial
    results are never returned silently.
    """
    from .backends import InferenceFrame  # deferred: backends imports Detection

    height, width = pixels.shape[:2]
    grid = compute_slice_grid(height, width, size_ratio, overlap)
    pooled: list[Detection] = []
    if include_full_frame:
        frame = InferenceFrame(pixels=pixels, image_id=image_id, region=(0, 0, width, height))
        try:
            pooled.extend(replace(d, origin=FULL_FRAME) for d in backend.detect(frame))
        except Exception as exc:
            raise BackendError(f"backend failed on full frame of {image_id or '<image>'}: {exc}") from exc
    for index, rect in enumerate(grid.slices):
        x0, y0, x1, y1 = rect
        view = InferenceFrame(pixels=pixels[y0:y1, x0:x1], image_id=image_id, region=rect)
        try:
            local = backend.detect(view)
        except Exception as exc:
            raise BackendError(f"backend failed on slice {index} of {image_id or '<image>'}: {exc}") from exc
        pooled.extend(remap_detection(rect, d, index) for d in local)
    return nms(pooled, iou_threshold)


# ---------------------------------------------------------------------------
# Detection output file schema (one JSON document per image)


def detections_to_json(
    image_id: str,
    frame_hw: tuple[int, int],
    dets: list[Detection],
    params: dict | None = None,
) -> dict:
    return {
        "image_id": image_id,
        "height": frame_hw[0],
        "width": frame_hw[1],
        "params": params or {},
        "detections": [
            {
                "box": [float(v) for v in d.box],
                "score": float(d.score),
                "class_id": int(d.class_id),
                "origin": d.origin,
            }
            for d in dets
        ],
    }


def detections_from_json(doc: dict) -> tuple[str, list[Detection]]:
    dets = [
        Detection(
            box=tuple(float(v) for v in d["box"]),
            score=float(d["score"]),
            class_id=int(d.get("class_id", 0)),
            origin=str(d.get("origin", FULL_FRAME)),
        )
        for d in doc.get("detections", [])
    ]
    return str(doc["image_id"]), dets
