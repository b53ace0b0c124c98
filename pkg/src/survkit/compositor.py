"""Instance cutouts and spatially-constrained compositing.

Cutouts are RGBA sprites lifted from labeled source images. They are pasted
into target frames under one of three placement strategies:

* overlap: the new box intersects an existing box but its center keeps a
  minimum distance (10% of that box's diagonal) from every existing center,
  so the paste occludes without duplicating;
* edge: the box crosses a frame border with at least half of its area
  still visible;
* center: the box lands fully inside the central 60% region of the frame.

Blending adapts the sprite to the scene: a luma gain matches local
brightness and additive Gaussian noise matches the local Laplacian-variance
noise level, then standard alpha-over compositing.

All pixel rects are half-open integer (x0, y0, x1, y1).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import AnnotatedImage, BBox, Provenance, snap_to_unit_frame
from .errors import BlendError, CutoutError, PlacementFailed

MIN_CUTOUT_SIDE = 8
DEFAULT_FEATHER_PX = 4
DEFAULT_ROTATION_RANGE_DEG = 15.0
DEFAULT_MAX_ATTEMPTS = 50
OVERLAP_MIN_CENTER_GAP = 0.1  # fraction of the overlapped box's diagonal
EDGE_MIN_VISIBLE = 0.5
CENTER_REGION_FRACTION = 0.6
SCALE_JITTER = (0.8, 1.25)
FALLBACK_AREA_FRACTION = 0.02
DEFAULT_GAIN_CLAMP = (0.5, 2.0)
DEFAULT_NOISE_COEFF = 0.05
LUMA_EPS = 1e-3

Rect = tuple[int, int, int, int]


def luma255(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma on a 0..255 scale, float."""
    r, g, b = rgb[..., 0].astype(np.float64), rgb[..., 1].astype(np.float64), rgb[..., 2].astype(np.float64)
    return 0.299 * r + 0.587 * g + 0.114 * b


def _clip_rect(rect: Rect, height: int, width: int) -> Rect:
    x0, y0, x1, y1 = rect
    return max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)


def _rect_area(rect: Rect) -> int:
    x0, y0, x1, y1 = rect
    return max(0, x1 - x0) * max(0, y1 - y0)


@dataclass(frozen=True)
class Cutout:
    """An RGBA sprite of one segmented instance (alpha = instance mask)."""

    rgba: np.ndarray
    source_image_id: str
    source_box: BBox
    mean_luma: float

    def __post_init__(self) -> None:
        h, w = self.rgba.shape[:2]
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4:
            raise CutoutError("cutout buffer must be h×w×4")
        if h < MIN_CUTOUT_SIDE or w < MIN_CUTOUT_SIDE:
            raise CutoutError(f"cutout {w}×{h} below minimum {MIN_CUTOUT_SIDE}px")
        if not (self.rgba[..., 3] > 0).any():
            raise CutoutError("cutout is fully transparent")

    @property
    def size_hw(self) -> tuple[int, int]:
        return self.rgba.shape[0], self.rgba.shape[1]


@dataclass(frozen=True)
class Placement:
    strategy: str  # overlap | edge | center
    rect: Rect  # may extend beyond the frame for the edge strategy
    rotation_deg: float = 0.0
    scale: float = 1.0


def _alpha_weighted_luma(rgba: np.ndarray) -> float:
    alpha = rgba[..., 3].astype(np.float64) / 255.0
    total = alpha.sum()
    if total <= 0:
        raise CutoutError("cutout is fully transparent")
    return float((luma255(rgba[..., :3]) / 255.0 * alpha).sum() / total)


def feathered_alpha(height: int, width: int, feather: int = DEFAULT_FEATHER_PX) -> np.ndarray:
    """Rectangle mask: 255 in the interior, linear ramp to 0 at the borders.

    A pixel's alpha is 255·d/feather where d is its distance (in pixels) to
    the nearest edge, saturating at 255 once d >= feather.
    """
    ys = np.minimum(np.arange(height), np.arange(height)[::-1])
    xs = np.minimum(np.arange(width), np.arange(width)[::-1])
    d = np.minimum(ys[:, None], xs[None, :]).astype(np.float64)
    if feather <= 0:
        return np.full((height, width), 255, dtype=np.uint8)
    return np.round(np.clip(d / feather, 0.0, 1.0) * 255.0).astype(np.uint8)


def extract_cutout(
    image: AnnotatedImage,
    box: BBox,
    mask_mode: str = "feathered_rect",
    feather: int = DEFAULT_FEATHER_PX,
    mask: np.ndarray | None = None,
) -> Cutout:
    """Crop a box region into an RGBA sprite.

    feathered_rect builds the alpha from the rectangle itself; external_mask
    copies a supplied single-channel mask of the crop's exact dimensions.
    """
    pixels = image.load_pixels()
    frame_h, frame_w = pixels.shape[:2]
    x0, y0, x1, y1 = box.to_pixel_rect(frame_h, frame_w)
    if x0 < 0 or y0 < 0 or x1 > frame_w or y1 > frame_h:
        raise CutoutError(f"box {box} exceeds the {frame_w}×{frame_h} frame")
    w, h = x1 - x0, y1 - y0
    if w < MIN_CUTOUT_SIDE or h < MIN_CUTOUT_SIDE:
        raise CutoutError(f"box region {w}×{h}px below minimum {MIN_CUTOUT_SIDE}px")
    crop = pixels[y0:y1, x0:x1]
    if mask_mode == "feathered_rect":
        alpha = feathered_alpha(h, w, feather)
    elif mask_mode == "external_mask":
        if mask is None:
            raise CutoutError("external_mask mode needs a mask array")
        if mask.shape[:2] != (h, w):
            raise CutoutError(f"mask size {mask.shape[:2]} != crop size {(h, w)}")
        alpha = mask.astype(np.uint8)
    else:
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    rgba = np.dstack([crop, alpha])
    return Cutout(
        rgba=rgba,
        source_image_id=image.image_id,
        source_box=box,
        mean_luma=_alpha_weighted_luma(rgba),
    )


def rotate_cutout(
    cutout: Cutout, angle_deg: float, max_angle: float = DEFAULT_ROTATION_RANGE_DEG
) -> Cutout:
    """Rotate about the sprite center, bilinear, canvas expanded to fit."""
    if abs(angle_deg) > max_angle:
        raise ValueError(f"rotation {angle_deg}° outside ±{max_angle}° range")
    if angle_deg == 0.0:
        return cutout
    im = Image.fromarray(cutout.rgba, mode="RGBA")
    rotated = np.asarray(im.rotate(angle_deg, resample=Image.BILINEAR, expand=True))
    return replace(cutout, rgba=rotated, mean_luma=_alpha_weighted_luma(rotated))


def sample_scale(
    target_boxes: list[BBox],
    frame_hw: tuple[int, int],
    cutout_hw: tuple[int, int],
    rng: np.random.Generator,
    jitter: tuple[float, float] = SCALE_JITTER,
    fallback_area_fraction: float = FALLBACK_AREA_FRACTION,
) -> tuple[float, bool]:
    """Scale the sprite so its area matches a box already in the scene.

    One existing box is drawn uniformly; the sprite is scaled so its area
    equals that box's pixel area times a jitter factor. Frames without boxes
    fall back to a fixed fraction of the frame area (flagged in the second
    return value for provenance). The result is clamped so the sprite stays
    between the 8px minimum and the frame size.
    """
    frame_h, frame_w = frame_hw
    ch, cw = cutout_hw
    native_area = float(ch * cw)
    fallback = not target_boxes
    if fallback:
        target_area = fallback_area_fraction * frame_h * frame_w
    else:
        b = target_boxes[int(rng.integers(len(target_boxes)))]
        target_area = (b.w * frame_w) * (b.h * frame_h)
    j = float(rng.uniform(*jitter))
    scale = math.sqrt(target_area * j / native_area)
    scale = max(scale, MIN_CUTOUT_SIDE / ch, MIN_CUTOUT_SIDE / cw)
    scale = min(scale, frame_h / ch, frame_w / cw)  # must fit the frame
    return scale, fallback


def _centers_ok(rect: Rect, existing_px: list[Rect], min_gap: float) -> bool:
    cx = (rect[0] + rect[2]) / 2.0
    cy = (rect[1] + rect[3]) / 2.0
    for bx0, by0, bx1, by1 in existing_px:
        diag = math.hypot(bx1 - bx0, by1 - by0)
        if math.hypot(cx - (bx0 + bx1) / 2.0, cy - (by0 + by1) / 2.0) < min_gap * diag:
            return False
    return True


def _intersects_any(rect: Rect, existing_px: list[Rect]) -> bool:
    x0, y0, x1, y1 = rect
    for bx0, by0, bx1, by1 in existing_px:
        if min(x1, bx1) > max(x0, bx0) and min(y1, by1) > max(y0, by0):
            return True
    return False


def place_overlap(
    existing: list[BBox],
    sprite_hw: tuple[int, int],
    frame_hw: tuple[int, int],
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    min_center_gap: float = OVERLAP_MIN_CENTER_GAP,
) -> Placement:
    """Occlusion: intersect some existing box without center coincidence.

    Proposals anchor on a randomly chosen existing box so the intersection
    predicate holds by construction; the center-distance predicate is then
    checked against every box.
    """
    if not existing:
        raise PlacementFailed("overlap placement needs at least one existing box")
    frame_h, frame_w = frame_hw
    sh, sw = sprite_hw
    if sh > frame_h or sw > frame_w:
        raise PlacementFailed(f"sprite {sw}×{sh} larger than frame {frame_w}×{frame_h}")
    existing_px = [b.to_pixel_rect(frame_h, frame_w) for b in existing]
    for _ in range(max_attempts):
        ax0, ay0, ax1, ay1 = existing_px[int(rng.integers(len(existing_px)))]
        # x0 range giving positive x-overlap with the anchor, and in-frame.
        x_lo, x_hi = max(0, ax0 - sw + 1), min(frame_w - sw, ax1 - 1)
        y_lo, y_hi = max(0, ay0 - sh + 1), min(frame_h - sh, ay1 - 1)
        if x_lo > x_hi or y_lo > y_hi:
            continue
        x0 = int(rng.integers(x_lo, x_hi + 1))
        y0 = int(rng.integers(y_lo, y_hi + 1))
        rect = (x0, y0, x0 + sw, y0 + sh)
        if _intersects_any(rect, existing_px) and _centers_ok(rect, existing_px, min_center_gap):
            return Placement(strategy="overlap", rect=rect)
    raise PlacementFailed(f"no overlap placement in {max_attempts} attempts")


def edge_visible_fraction(rect: Rect, frame_hw: tuple[int, int]) -> float:
    total = _rect_area(rect)
    if total == 0:
        return 0.0
    return _rect_area(_clip_rect(rect, *frame_hw)) / total


def place_edge(
    sprite_hw: tuple[int, int],
    frame_hw: tuple[int, int],
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    min_visible: float = EDGE_MIN_VISIBLE,
) -> Placement:
    """Truncation: cross one frame border, keeping >= half the area inside."""
    frame_h, frame_w = frame_hw
    sh, sw = sprite_hw
    if sh > frame_h or sw > frame_w:
        raise PlacementFailed(f"sprite {sw}×{sh} larger than frame {frame_w}×{frame_h}")
    for _ in range(max_attempts):
        side = int(rng.integers(4))  # 0 left, 1 right, 2 top, 3 bottom
        horizontal = side < 2
        span = sw if horizontal else sh
        max_overhang = int(math.floor(span * (1.0 - min_visible)))
        if max_overhang < 1:
            continue
        k = int(rng.integers(1, max_overhang + 1))
        if horizontal:
            x0 = -k if side == 0 else frame_w - sw + k
            y0 = int(rng.integers(0, frame_h - sh + 1))
        else:
            y0 = -k if side == 2 else frame_h - sh + k
            x0 = int(rng.integers(0, frame_w - sw + 1))
        rect = (x0, y0, x0 + sw, y0 + sh)
        visible = edge_visible_fraction(rect, frame_hw)
        if min_visible <= visible < 1.0:
            return Placement(strategy="edge", rect=rect)
    raise PlacementFailed(f"no edge placement in {max_attempts} attempts")


def central_region(frame_hw: tuple[int, int], fraction: float = CENTER_REGION_FRACTION) -> Rect:
    """The frame shrunk to `fraction` of each dimension about its center."""
    frame_h, frame_w = frame_hw
    margin_x = int(round(frame_w * (1.0 - fraction) / 2.0))
    margin_y = int(round(frame_h * (1.0 - fraction) / 2.0))
    return margin_x, margin_y, frame_w - margin_x, frame_h - margin_y


def place_center(
    sprite_hw: tuple[int, int],
    frame_hw: tuple[int, int],
    rng: np.random.Generator,
    fraction: float = CENTER_REGION_FRACTION,
) -> Placement:
    """Neutral placement: uniform position fully inside the central region."""
    sh, sw = sprite_hw
    rx0, ry0, rx1, ry1 = central_region(frame_hw, fraction)
    if sw > rx1 - rx0 or sh > ry1 - ry0:
        raise PlacementFailed(
            f"sprite {sw}×{sh} larger than central region {rx1 - rx0}×{ry1 - ry0}"
        )
    x0 = rx0 + int(rng.integers(0, (rx1 - rx0 - sw) + 1))
    y0 = ry0 + int(rng.integers(0, (ry1 - ry0 - sh) + 1))
    return Placement(strategy="center", rect=(x0, y0, x0 + sw, y0 + sh))


def estimate_brightness(pixels: np.ndarray, rect: Rect) -> float:
    """Mean luma over rect ∩ frame, normalized to [0, 1]."""
    x0, y0, x1, y1 = _clip_rect(rect, pixels.shape[0], pixels.shape[1])
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"rect {rect} does not intersect the frame")
    return float(luma255(pixels[y0:y1, x0:x1]).mean() / 255.0)


def estimate_noise(pixels: np.ndarray, rect: Rect) -> float:
    """Variance of the 4-neighbor Laplacian of luma over the region interior.

    Kernel response at (y, x) is the sum of the four edge neighbors minus
    4× the center, evaluated where the kernel fits inside rect ∩ frame.
    """
    x0, y0, x1, y1 = _clip_rect(rect, pixels.shape[0], pixels.shape[1])
    if x1 - x0 < 3 or y1 - y0 < 3:
        raise ValueError(f"region {rect} smaller than 3×3 after clipping")
    g = luma255(pixels[y0:y1, x0:x1])
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return float(lap.var())


def blend_composite(
    image: AnnotatedImage,
    cutout: Cutout,
    placement: Placement,
    rng: np.random.Generator,
    gain_clamp: tuple[float, float] = DEFAULT_GAIN_CLAMP,
    noise_coeff: float = DEFAULT_NOISE_COEFF,
) -> AnnotatedImage:
    """Paste the sprite per the placement, photometrically matched to the scene.

    The sprite is resized to the placement rect, its luma gain-matched to the
    region brightness (gain clamped to avoid blowout on near-black regions),
    Gaussian noise matched to the region's Laplacian noise level is added,
    and the result is alpha-over composited. A class-0 box for the rect
    clipped to the frame is appended; pixels outside the rect are untouched.
    """
    pixels = image.load_pixels()
    frame_h, frame_w = pixels.shape[:2]
    x0, y0, x1, y1 = placement.rect
    rw, rh = x1 - x0, y1 - y0
    if rw <= 0 or rh <= 0:
        raise BlendError(f"degenerate placement rect {placement.rect}")

    if (rh, rw) == cutout.size_hw:
        sprite = cutout.rgba
    else:
        sprite = np.asarray(
            Image.fromarray(cutout.rgba, mode="RGBA").resize((rw, rh), Image.BILINEAR)
        )

    brightness = estimate_brightness(pixels, placement.rect)
    lap_var = estimate_noise(pixels, placement.rect)
    gain = float(np.clip(brightness / max(cutout.mean_luma, LUMA_EPS), *gain_clamp))

    rgb = sprite[..., :3].astype(np.float64) * gain
    sigma = noise_coeff * math.sqrt(lap_var)
    if sigma > 0:
        rgb = rgb + rng.normal(0.0, sigma, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 255.0)

    cx0, cy0, cx1, cy1 = _clip_rect(placement.rect, frame_h, frame_w)
    if cx1 <= cx0 or cy1 <= cy0:
        raise BlendError("placement rect lies entirely outside the frame")
    sub = (slice(cy0 - y0, cy1 - y0), slice(cx0 - x0, cx1 - x0))
    alpha = sprite[..., 3][sub].astype(np.float64) / 255.0
    if not (alpha > 0).any():
        raise BlendError("sprite is fully transparent over the visible region")

    out = pixels.copy()
    region = out[cy0:cy1, cx0:cx1].astype(np.float64)
    blended = alpha[..., None] * rgb[sub] + (1.0 - alpha[..., None]) * region
    out[cy0:cy1, cx0:cx1] = np.round(blended).astype(np.uint8)

    new_box = snap_to_unit_frame(BBox.from_pixel_rect((cx0, cy0, cx1, cy1), frame_h, frame_w))
    return replace(
        image,
        pixels=out,
        boxes=[*image.boxes, new_box],
        provenance=Provenance.COMPOSITED,
    )


# ---------------------------------------------------------------------------
# Cutout bank: RGBA PNG per sprite plus a JSON sidecar with its origin.


def save_cutout(cutout: Cutout, directory: Path, cutout_id: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(cutout.rgba, mode="RGBA").save(directory / f"{cutout_id}.png")
    sidecar = {
        "source_image_id": cutout.source_image_id,
        "source_box": {
            "class_id": cutout.source_box.class_id,
            "cx": cutout.source_box.cx,
            "cy": cutout.source_box.cy,
            "w": cutout.source_box.w,
            "h": cutout.source_box.h,
        },
        "mean_luma": cutout.mean_luma,
    }
    (directory / f"{cutout_id}.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_cutout(directory: Path, cutout_id: str) -> Cutout:
    rgba = np.asarray(Image.open(directory / f"{cutout_id}.png").convert("RGBA"))
    meta = json.loads((directory / f"{cutout_id}.json").read_text(encoding="utf-8"))
    return Cutout(
        rgba=rgba,
        source_image_id=meta["source_image_id"],
        source_box=BBox(**meta["source_box"]),
        mean_luma=float(meta["mean_luma"]),
    )


class CutoutBank:
    """Directory of saved cutouts; sampling is uniform over sorted ids."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.ids = sorted(p.stem for p in self.directory.glob("*.png"))
        self._cache: dict[str, Cutout] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def get(self, cutout_id: str) -> Cutout:
        cutout = self._cache.get(cutout_id)
        if cutout is None:
            cutout = self._cache[cutout_id] = load_cutout(self.directory, cutout_id)
        return cutout

    def sample(self, rng: np.random.Generator) -> tuple[str, Cutout]:
        if not self.ids:
            raise CutoutError(f"cutout bank {self.directory} is empty")
        cutout_id = self.ids[int(rng.integers(len(self.ids)))]
        return cutout_id, self.get(cutout_id)


def build_cutout_bank(
    images: list[AnnotatedImage],
    out_dir: Path,
    mask_mode: str = "feathered_rect",
    feather: int = DEFAULT_FEATHER_PX,
    masks_dir: Path | None = None,
    limit: int | None = None,
) -> tuple[int, int]:
    """Extract every usable box into `out_dir`; returns (saved, skipped).

    With external masks, the mask for box i of image X is read from
    masks_dir/X_i.png and must match the crop's dimensions.
    """
    saved = skipped = 0
    for img in images:
        for idx, box in enumerate(img.boxes):
            if limit is not None and saved >= limit:
                return saved, skipped
            cutout_id = f"{img.image_id}_{idx}"
            try:
                mask = None
                if mask_mode == "external_mask":
                    mask_path = (masks_dir or Path(".")) / f"{cutout_id}.png"
                    mask = np.asarray(Image.open(mask_path).convert("L"))
                cutout = extract_cutout(img, box, mask_mode=mask_mode, feather=feather, mask=mask)
            except (CutoutError, FileNotFoundError):
                skipped += 1
                continue
            save_cutout(cutout, out_dir, cutout_id)
            saved += 1
    return saved, skipped
