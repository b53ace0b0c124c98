from __future__ import annotations

import math

import numpy as np
import pytest

from survkit.compositor import (
    CutoutBank,
    Placement,
    blend_composite,
    build_cutout_bank,
    central_region,
    edge_visible_fraction,
    estimate_brightness,
    estimate_noise,
    extract_cutout,
    load_cutout,
    place_center,
    place_edge,
    place_overlap,
    rotate_cutout,
    sample_scale,
    save_cutout,
)
from survkit.dataset import AnnotatedImage, BBox
from survkit.errors import BlendError, CutoutError, PlacementFailed

from conftest import build_dataset


def make_image(pixels: np.ndarray, boxes=None, image_id="img") -> AnnotatedImage:
    return AnnotatedImage(image_id=image_id, boxes=boxes or [], pixels=pixels)


def gray(value: int, hw=(100, 100)) -> np.ndarray:
    return np.full((*hw, 3), value, dtype=np.uint8)


# --------------------------------------------------------------------------
# extract_cutout


class TestExtract:
    def test_feather_profile(self):
        # Box covering pixels [20,20]-[60,80] of a 100x100 frame -> 40x60 crop.
        img = make_image(gray(128))
        box = BBox(0, cx=0.4, cy=0.5, w=0.4, h=0.6)
        cut = extract_cutout(img, box, feather=4)
        assert cut.rgba.shape == (60, 40, 4)
        row = cut.rgba[30, :, 3]  # middle row
        # 255*d/4 rounded: d = 0,1,2,3 -> 0, 64, 128, 191; interior saturated.
        assert list(row[:5]) == [0, 64, 128, 191, 255]
        assert list(row[-5:]) == [255, 191, 128, 64, 0]
        assert (row[4:-4] == 255).all()

    def test_external_mask_identity(self):
        img = make_image(gray(90))
        box = BBox(0, 0.4, 0.5, 0.4, 0.6)
        mask = np.full((60, 40), 255, dtype=np.uint8)
        cut = extract_cutout(img, box, mask_mode="external_mask", mask=mask)
        assert (cut.rgba[..., 3] == mask).all()

    def test_external_mask_size_mismatch(self):
        img = make_image(gray(90))
        box = BBox(0, 0.4, 0.5, 0.4, 0.6)
        with pytest.raises(CutoutError, match="mask size"):
            extract_cutout(img, box, mask_mode="external_mask", mask=np.zeros((10, 10), np.uint8))

    def test_too_small_rejected(self):
        img = make_image(gray(90))
        with pytest.raises(CutoutError, match="below minimum"):
            extract_cutout(img, BBox(0, 0.5, 0.5, 0.04, 0.04))

    def test_out_of_frame_rejected(self):
        img = make_image(gray(90, hw=(50, 50)))
        with pytest.raises(CutoutError, match="exceeds"):
            extract_cutout(img, BBox(0, 0.95, 0.5, 0.2, 0.4))

    def test_mean_luma_of_uniform_crop(self):
        img = make_image(gray(204))
        cut = extract_cutout(img, BBox(0, 0.4, 0.5, 0.4, 0.6), feather=0)
        assert cut.mean_luma == pytest.approx(204 / 255, abs=1e-9)


# --------------------------------------------------------------------------
# sample_scale


class TestSampleScale:
    def test_identity_scale(self):
        rng = np.random.default_rng(0)
        # One existing box of pixel area 10000 (100x100 in a 200x200 frame).
        boxes = [BBox(0, 0.5, 0.5, 0.5, 0.5)]
        scale, fallback = sample_scale(boxes, (200, 200), (100, 100), rng, jitter=(1.0, 1.0))
        assert scale == pytest.approx(1.0)
        assert not fallback

    def test_linear_scale_is_sqrt_of_area_ratio(self):
        rng = np.random.default_rng(0)
        boxes = [BBox(0, 0.5, 0.5, 0.5, 0.5)]  # 200x200 px in a 400x400 frame
        scale, _ = sample_scale(boxes, (400, 400), (100, 100), rng, jitter=(1.0, 1.0))
        assert scale == pytest.approx(2.0)

    def test_fallback_area_fraction(self):
        rng = np.random.default_rng(0)
        scale, fallback = sample_scale([], (480, 640), (64, 64), rng, jitter=(1.0, 1.0))
        assert fallback
        assert scale**2 * 64 * 64 == pytest.approx(0.02 * 480 * 640)  # 6144 px²

    def test_min_side_clamp(self):
        rng = np.random.default_rng(0)
        boxes = [BBox(0, 0.5, 0.5, 0.01, 0.01)]  # tiny target area
        scale, _ = sample_scale(boxes, (1000, 1000), (100, 100), rng, jitter=(1.0, 1.0))
        assert round(100 * scale) >= 8

    def test_frame_clamp(self):
        rng = np.random.default_rng(0)
        boxes = [BBox(0, 0.5, 0.5, 1.0, 1.0)]
        scale, _ = sample_scale(boxes, (50, 50), (40, 40), rng, jitter=(1.25, 1.25))
        assert round(40 * scale) <= 50


# --------------------------------------------------------------------------
# rotate_cutout


def disc_cutout(radius=40, pad=10):
    size = 2 * (radius + pad) + 1
    rgba = np.zeros((size, size, 4), np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (yy - size // 2) ** 2 + (xx - size // 2) ** 2 <= radius**2
    rgba[..., 0][mask] = 200
    rgba[..., 3][mask] = 255
    from survkit.compositor import Cutout

    return Cutout(rgba=rgba, source_image_id="disc", source_box=BBox(0, 0.5, 0.5, 0.5, 0.5), mean_luma=0.3)


class TestRotate:
    def test_zero_angle_bit_identical(self):
        cut = disc_cutout()
        out = rotate_cutout(cut, 0.0)
        assert np.array_equal(out.rgba, cut.rgba)

    def test_right_angle_swaps_dimensions(self):
        rgba = np.zeros((20, 30, 4), np.uint8)
        rgba[..., 3] = 255
        rgba[..., 1] = 77
        from survkit.compositor import Cutout

        cut = Cutout(rgba=rgba, source_image_id="r", source_box=BBox(0, 0.5, 0.5, 0.5, 0.5), mean_luma=0.2)
        out = rotate_cutout(cut, 90.0, max_angle=90.0)
        assert out.size_hw == (30, 20)

    def test_small_angle_preserves_alpha_mass(self):
        cut = disc_cutout()
        before = cut.rgba[..., 3].astype(np.float64).sum()
        after = rotate_cutout(cut, 10.0).rgba[..., 3].astype(np.float64).sum()
        assert abs(after - before) / before < 0.02

    def test_angle_outside_range(self):
        with pytest.raises(ValueError, match="outside"):
            rotate_cutout(disc_cutout(), 20.0)


# --------------------------------------------------------------------------
# placements (1000-trial predicate sweeps; re-run by the acceptance suite)


def rect_intersection_area(a, b):
    return max(0, min(a[2], b[2]) - max(a[0], b[0])) * max(0, min(a[3], b[3]) - max(a[1], b[1]))


class TestPlaceOverlap:
    def test_predicates_hold_over_1000_trials(self):
        rng = np.random.default_rng(42)
        frame = (200, 200)
        existing = [BBox(0, 0.5, 0.5, 0.4, 0.4)]  # 80x80 box centered
        box_px = existing[0].to_pixel_rect(*frame)
        diag = math.hypot(box_px[2] - box_px[0], box_px[3] - box_px[1])
        for _ in range(1000):
            p = place_overlap(existing, (60, 60), frame, rng)
            x0, y0, x1, y1 = p.rect
            assert 0 <= x0 < x1 <= 200 and 0 <= y0 < y1 <= 200
            assert rect_intersection_area(p.rect, box_px) > 0
            cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
            bcx, bcy = (box_px[0] + box_px[2]) / 2, (box_px[1] + box_px[3]) / 2
            assert math.hypot(cx - bcx, cy - bcy) >= 0.1 * diag

    def test_exact_center_rejected(self):
        # A sprite exactly on an existing box's center violates the gap rule.
        frame = (100, 100)
        existing = [BBox(0, 0.5, 0.5, 0.4, 0.4)]
        from survkit.compositor import _centers_ok

        centered = (30, 30, 70, 70)  # same center as the existing box
        assert not _centers_ok(centered, [existing[0].to_pixel_rect(*frame)], 0.1)

    def test_no_existing_boxes_fails(self):
        with pytest.raises(PlacementFailed, match="existing"):
            place_overlap([], (20, 20), (100, 100), np.random.default_rng(0))

    def test_multiple_boxes_all_respected(self):
        rng = np.random.default_rng(7)
        frame = (200, 200)
        existing = [BBox(0, 0.3, 0.3, 0.2, 0.2), BBox(0, 0.7, 0.7, 0.3, 0.3)]
        rects_px = [b.to_pixel_rect(*frame) for b in existing]
        for _ in range(200):
            p = place_overlap(existing, (40, 40), frame, rng)
            assert any(rect_intersection_area(p.rect, r) > 0 for r in rects_px)
            for r in rects_px:
                diag = math.hypot(r[2] - r[0], r[3] - r[1])
                cx, cy = (p.rect[0] + p.rect[2]) / 2, (p.rect[1] + p.rect[3]) / 2
                assert math.hypot(cx - (r[0] + r[2]) / 2, cy - (r[1] + r[3]) / 2) >= 0.1 * diag


class TestPlaceEdge:
    def test_predicates_hold_over_1000_trials(self):
        rng = np.random.default_rng(43)
        frame = (120, 160)
        for _ in range(1000):
            p = place_edge((40, 50), frame, rng)
            frac = edge_visible_fraction(p.rect, frame)
            assert 0.5 <= frac < 1.0
            x0, y0, x1, y1 = p.rect
            assert x0 < 0 or y0 < 0 or x1 > 160 or y1 > 120  # crosses a border

    def test_exact_half_visible_is_accepted(self):
        # 100-wide sprite with its center on the right border: exactly 50%.
        frame = (300, 200)
        rect = (150, 100, 250, 200)
        assert edge_visible_fraction(rect, frame) == pytest.approx(0.5)

    def test_fully_inside_not_produced(self):
        frame = (100, 100)
        assert edge_visible_fraction((10, 10, 50, 50), frame) == 1.0  # would be rejected

    def test_mostly_outside_not_produced(self):
        frame = (100, 100)
        assert edge_visible_fraction((-75, 0, 25, 100), frame) == pytest.approx(0.25)

    def test_sprite_larger_than_frame_fails(self):
        with pytest.raises(PlacementFailed):
            place_edge((200, 200), (100, 100), np.random.default_rng(0))


class TestPlaceCenter:
    def test_region_bounds_640x480(self):
        assert central_region((480, 640)) == (128, 96, 512, 384)

    def test_predicates_hold_over_1000_trials(self):
        rng = np.random.default_rng(44)
        frame = (480, 640)
        rx0, ry0, rx1, ry1 = central_region(frame)
        for _ in range(1000):
            p = place_center((50, 70), frame, rng)
            x0, y0, x1, y1 = p.rect
            assert rx0 <= x0 and ry0 <= y0 and x1 <= rx1 and y1 <= ry1

    def test_region_sized_sprite_is_forced_to_origin(self):
        frame = (100, 100)
        rx0, ry0, rx1, ry1 = central_region(frame)
        p = place_center((ry1 - ry0, rx1 - rx0), frame, np.random.default_rng(0))
        assert p.rect == (rx0, ry0, rx1, ry1)

    def test_oversized_sprite_fails(self):
        with pytest.raises(PlacementFailed, match="central region"):
            place_center((90, 90), (100, 100), np.random.default_rng(0))


# --------------------------------------------------------------------------
# photometric estimates


class TestBrightness:
    def test_black_is_zero(self):
        assert estimate_brightness(gray(0), (0, 0, 50, 50)) == 0.0

    def test_white_is_one(self):
        assert estimate_brightness(gray(255), (0, 0, 50, 50)) == 1.0

    def test_mid_gray(self):
        assert estimate_brightness(gray(128), (10, 10, 40, 40)) == pytest.approx(128 / 255, abs=1e-9)

    def test_empty_intersection_errors(self):
        with pytest.raises(ValueError, match="intersect"):
            estimate_brightness(gray(10), (200, 200, 300, 300))


def laplacian_variance_oracle(pixels: np.ndarray, rect) -> float:
    """Independent per-pixel convolution: explicit loops, no vectorization."""
    x0, y0, x1, y1 = rect
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, pixels.shape[1]), min(y1, pixels.shape[0])
    luma = [
        [
            0.299 * float(pixels[y, x, 0]) + 0.587 * float(pixels[y, x, 1]) + 0.114 * float(pixels[y, x, 2])
            for x in range(x0, x1)
        ]
        for y in range(y0, y1)
    ]
    h, w = len(luma), len(luma[0])
    values = []
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            values.append(
                luma[y - 1][x] + luma[y + 1][x] + luma[y][x - 1] + luma[y][x + 1] - 4 * luma[y][x]
            )
    mean = sum(values) / len(values)
    return sum((v - mean) ** 2 for v in values) / len(values)


class TestNoise:
    def test_constant_image_is_zero(self):
        assert estimate_noise(gray(77), (0, 0, 60, 60)) == 0.0

    def test_checkerboard_variance(self):
        # 0/255 checkerboard: responses are ±1020 on the interior, variance 1020².
        g = ((np.indices((8, 8)).sum(axis=0) % 2) * 255).astype(np.uint8)
        pixels = np.dstack([g, g, g])
        assert estimate_noise(pixels, (0, 0, 8, 8)) == pytest.approx(1020**2, abs=1e-6)

    def test_impulse_matches_convolution_oracle(self):
        pixels = np.zeros((9, 9, 3), np.uint8)
        pixels[4, 4] = 255
        got = estimate_noise(pixels, (0, 0, 9, 9))
        assert got == pytest.approx(laplacian_variance_oracle(pixels, (0, 0, 9, 9)), rel=1e-12)

    def test_random_regions_match_oracle(self):
        rng = np.random.default_rng(5)
        pixels = rng.integers(0, 256, size=(20, 24, 3)).astype(np.uint8)
        for rect in [(0, 0, 24, 20), (3, 2, 13, 11), (10, 5, 24, 20)]:
            assert estimate_noise(pixels, rect) == pytest.approx(
                laplacian_variance_oracle(pixels, rect), rel=1e-9
            )

    def test_too_small_region(self):
        with pytest.raises(ValueError, match="3×3"):
            estimate_noise(gray(10), (0, 0, 2, 2))


# --------------------------------------------------------------------------
# blend_composite


def opaque_cutout(value: int, hw=(20, 20)):
    from survkit.compositor import Cutout

    rgba = np.zeros((*hw, 4), np.uint8)
    rgba[..., :3] = value
    rgba[..., 3] = 255
    return Cutout(
        rgba=rgba,
        source_image_id="c",
        source_box=BBox(0, 0.5, 0.5, 0.5, 0.5),
        mean_luma=value / 255,
    )


class TestBlend:
    def test_degenerate_blend_is_direct_paste(self):
        img = make_image(gray(128, hw=(60, 60)))
        cut = opaque_cutout(200)
        placement = Placement("center", (10, 15, 30, 35))
        out = blend_composite(img, cut, placement, np.random.default_rng(0), gain_clamp=(1, 1), noise_coeff=0)
        assert (out.pixels[15:35, 10:30] == 200).all()
        assert len(out.boxes) == 1
        b = out.boxes[0]
        assert (b.cx, b.cy, b.w, b.h) == pytest.approx((20 / 60, 25 / 60, 20 / 60, 20 / 60), abs=1e-6)

    def test_pixels_outside_rect_untouched(self):
        rng = np.random.default_rng(1)
        base = rng.integers(0, 256, size=(60, 60, 3)).astype(np.uint8)
        img = make_image(base.copy())
        out = blend_composite(
            img, opaque_cutout(10), Placement("center", (10, 15, 30, 35)), np.random.default_rng(0)
        )
        mask = np.ones((60, 60), bool)
        mask[15:35, 10:30] = False
        assert np.array_equal(out.pixels[mask], base[mask])
        assert np.array_equal(img.pixels, base)  # input untouched

    def test_gain_halves_sprite_luma(self):
        # Region brightness 0.4 (gray 102), cutout mean luma 0.8 -> g = 0.5.
        img = make_image(gray(102, hw=(60, 60)))
        cut = opaque_cutout(204)  # mean_luma = 0.8
        out = blend_composite(
            img, cut, Placement("center", (10, 10, 30, 30)), np.random.default_rng(0), noise_coeff=0
        )
        assert (out.pixels[10:30, 10:30] == 102).all()  # 204 * 0.5

    def test_gain_clamped(self):
        img = make_image(gray(0, hw=(60, 60)))  # brightness 0 -> raw gain 0 -> clamp 0.5
        cut = opaque_cutout(200)
        out = blend_composite(
            img, cut, Placement("center", (10, 10, 30, 30)), np.random.default_rng(0), noise_coeff=0
        )
        assert (out.pixels[10:30, 10:30] == 100).all()

    def test_edge_clip_annotation(self):
        img = make_image(gray(128, hw=(100, 100)))
        placement = Placement("edge", (-10, 40, 30, 80))  # 40x40 sprite, 25% outside
        out = blend_composite(
            img, opaque_cutout(50, hw=(40, 40)), placement, np.random.default_rng(0), noise_coeff=0
        )
        b = out.boxes[-1]
        assert 0 <= b.cx - b.w / 2 and b.cx + b.w / 2 <= 1
        assert b.w == pytest.approx(30 / 100, abs=1e-6)
        assert b.h == pytest.approx(40 / 100, abs=1e-6)

    def test_provenance_flips_to_composited(self):
        img = make_image(gray(128, hw=(60, 60)))
        out = blend_composite(
            img, opaque_cutout(10), Placement("center", (10, 10, 30, 30)), np.random.default_rng(0)
        )
        assert out.provenance.value == "composited"

    def test_fully_transparent_visible_part_errors(self):
        from survkit.compositor import Cutout

        rgba = np.zeros((20, 20, 4), np.uint8)
        rgba[..., 3][:, :2] = 255  # only the left 2 columns are opaque
        cut = Cutout(rgba=rgba, source_image_id="t", source_box=BBox(0, 0.5, 0.5, 0.5, 0.5), mean_luma=0.1)
        img = make_image(gray(128, hw=(50, 50)))
        # Visible part excludes the opaque columns (they hang off-frame).
        placement = Placement("edge", (-2, 10, 18, 30))
        with pytest.raises(BlendError, match="transparent"):
            blend_composite(img, cut, placement, np.random.default_rng(0))

    def test_noise_sigma_matches_region_level(self):
        rng = np.random.default_rng(3)
        base = rng.integers(0, 256, size=(80, 80, 3)).astype(np.uint8)
        img = make_image(base)
        cut = opaque_cutout(128, hw=(30, 30))
        out = blend_composite(
            img, cut, Placement("center", (20, 20, 50, 50)), np.random.default_rng(9), gain_clamp=(1, 1)
        )
        region = out.pixels[20:50, 20:50].astype(np.float64)
        sigma = 0.05 * math.sqrt(estimate_noise(base, (20, 20, 50, 50)))
        # Sampled std should be in the right ballpark (clipping shrinks it a bit).
        assert 0.3 * sigma < region.std() < 2.0 * sigma


# --------------------------------------------------------------------------
# cutout bank


class TestBank:
    def test_save_load_roundtrip(self, tmp_path):
        cut = opaque_cutout(150)
        save_cutout(cut, tmp_path, "a_0")
        loaded = load_cutout(tmp_path, "a_0")
        assert np.array_equal(loaded.rgba, cut.rgba)
        assert loaded.mean_luma == pytest.approx(cut.mean_luma)
        assert loaded.source_image_id == "c"

    def test_build_bank_from_dataset(self, tmp_path):
        from survkit.dataset import discover_dataset, load_annotations

        root = build_dataset(tmp_path / "d", {"train": 6}, seed=3)
        images = load_annotations(discover_dataset(root), "train")
        saved, skipped = build_cutout_bank(images, tmp_path / "bank")
        assert saved > 0
        bank = CutoutBank(tmp_path / "bank")
        assert len(bank) == saved
        _, cut = bank.sample(np.random.default_rng(0))
        assert cut.rgba.shape[2] == 4

    def test_empty_bank_sample_errors(self, tmp_path):
        bank = CutoutBank(tmp_path)
        with pytest.raises(CutoutError, match="empty"):
            bank.sample(np.random.default_rng(0))
