"""Image-level degradations that mimic low-end CCTV artifacts.

Two families: `noise` (additive stripe patterns, spatial filtering /
pixel corruption) and `light` (histogram equalization, contrast
stretching, color grading). A bundle draws one or two distinct ops from a
family and applies them in draw order. Annotations are never touched; a
degraded image keeps a byte-identical copy of its source label file.

All ops are total on valid input, clamp to [0, 255], and preserve the
image's dimensions. Degenerate inputs (constant images) pass through
unchanged rather than erroring, so batch runs never abort on blank frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

NOISE_OPS = ("stripe", "spatial_filter")
LIGHT_OPS = ("hist_eq", "contrast_stretch", "color_grade")
FAMILIES = {"noise": NOISE_OPS, "light": LIGHT_OPS}

# Parameter draw ranges for apply_bundle. Chosen to visibly degrade without
# destroying objects; override the dict (or pass explicit params) to retune.
DEFAULT_RANGES: dict = {
    "stripe_period": (2, 12),
    "stripe_amplitude": (6, 32),
    "blur_kernels": (3, 5, 7, 9),
    "corrupt_fraction": (0.002, 0.05),
    "stretch_percentiles": (2.0, 98.0),
    "gain": (0.6, 1.4),
}


@dataclass(frozen=True)
class DegradationSpec:
    family: str
    op: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.op not in FAMILIES.get(self.family, ()):
            raise ValueError(f"op {self.op!r} not in family {self.family!r}")

    def as_dict(self) -> dict:
        return {"family": self.family, "op": self.op, "params": dict(self.params)}


def stripe_noise(
    image: np.ndarray, period_px: int, amplitude: float, orientation: str = "horizontal"
) -> np.ndarray:
    """Scanline-style banding: alternate half-periods shifted by ±amplitude."""
    if period_px < 2:
        raise ValueError(f"period must be >= 2, got {period_px}")
    if not 0 <= amplitude <= 64:
        raise ValueError(f"amplitude must be in [0, 64], got {amplitude}")
    axis_len = image.shape[0] if orientation == "horizontal" else image.shape[1]
    idx = np.arange(axis_len)
    delta = np.where((idx % period_px) < period_px / 2.0, amplitude, -amplitude)
    shaped = delta[:, None, None] if orientation == "horizontal" else delta[None, :, None]
    return np.clip(image.astype(np.float64) + shaped, 0, 255).round().astype(np.uint8)


def _blur_kernel(mode: str, kernel: int) -> np.ndarray:
    if kernel % 2 == 0 or not 3 <= kernel <= 9:
        raise ValueError(f"blur kernel must be odd in [3, 9], got {kernel}")
    if mode == "box_blur":
        k1 = np.full(kernel, 1.0 / kernel)
    else:
        # Discrete gaussian; sigma tied to the kernel size the usual way.
        sigma = 0.3 * ((kernel - 1) * 0.5 - 1) + 0.8
        xs = np.arange(kernel) - kernel // 2
        k1 = np.exp(-(xs**2) / (2 * sigma**2))
        k1 /= k1.sum()
    return k1


def spatial_filter(
    image: np.ndarray,
    mode: str,
    kernel: int = 3,
    fraction: float = 0.01,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Blur (box/gaussian, edge-clamp padding) or salt-and-pepper corruption."""
    if mode in ("box_blur", "gaussian_blur"):
        if kernel == 1:
            return image.copy()
        k1 = _blur_kernel(mode, kernel)
        out = image.astype(np.float64)
        out = ndimage.convolve1d(out, k1, axis=0, mode="nearest")
        out = ndimage.convolve1d(out, k1, axis=1, mode="nearest")
        return np.clip(out, 0, 255).round().astype(np.uint8)
    if mode == "pixel_corrupt":
        if not 0 <= fraction <= 0.05:
            raise ValueError(f"corruption fraction must be in [0, 0.05], got {fraction}")
        if rng is None:
            raise ValueError("pixel_corrupt needs an rng")
        h, w = image.shape[:2]
        n = int(round(fraction * h * w))
        out = image.copy()
        if n:
            flat = rng.choice(h * w, size=n, replace=False)
            values = rng.choice(np.array([0, 255], dtype=np.uint8), size=n)
            out.reshape(-1, image.shape[2])[flat] = values[:, None]
        return out
    raise ValueError(f"unknown spatial_filter mode {mode!r}")


def _luma_u8(image: np.ndarray) -> np.ndarray:
    f = image.astype(np.float64)
    return np.clip(np.round(0.299 * f[..., 0] + 0.587 * f[..., 1] + 0.114 * f[..., 2]), 0, 255).astype(
        np.uint8
    )


def hist_eq(image: np.ndarray) -> np.ndarray:
    """Histogram-equalize luma; chroma follows via per-pixel luma ratio.

    Constant-luma images return unchanged (the CDF is degenerate there).
    """
    luma = _luma_u8(image)
    hist = np.bincount(luma.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    nonzero = cdf[hist > 0]
    if nonzero.size == 0:
        return image.copy()
    cdf_min = int(nonzero[0])
    total = int(cdf[-1])
    if total == cdf_min:  # single occupied level
        return image.copy()
    lut = np.round((cdf - cdf_min) / (total - cdf_min) * 255.0).clip(0, 255)
    new_luma = lut[luma]
    old = luma.astype(np.float64)
    ratio = np.where(old > 0, new_luma / np.maximum(old, 1.0), 1.0)
    out = np.clip(image.astype(np.float64) * ratio[..., None], 0, 255)
    return out.round().astype(np.uint8)


def contrast_stretch(image: np.ndarray, low_pct: float = 2.0, high_pct: float = 98.0) -> np.ndarray:
    """Per-channel linear map: low percentile -> 0, high percentile -> 255."""
    if not 0 <= low_pct < high_pct <= 100:
        raise ValueError(f"need 0 <= low < high <= 100, got ({low_pct}, {high_pct})")
    out = image.astype(np.float64).copy()
    for c in range(image.shape[2]):
        channel = out[..., c]
        lo, hi = np.percentile(channel, [low_pct, high_pct])
        if hi <= lo:
            continue
        out[..., c] = (channel - lo) * (255.0 / (hi - lo))
    return np.clip(out, 0, 255).round().astype(np.uint8)


def color_grade(image: np.ndarray, gains: tuple[float, float, float]) -> np.ndarray:
    """Per-channel gain, simulating tinted or badly white-balanced footage."""
    for g in gains:
        if not 0.6 <= g <= 1.4:
            raise ValueError(f"gain {g} outside [0.6, 1.4]")
    out = image.astype(np.float64) * np.asarray(gains)[None, None, :]
    return np.clip(out, 0, 255).round().astype(np.uint8)


def apply_spec(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Replay one recorded op; pixel_corrupt reseeds from its stored seed."""
    p = spec.params
    if spec.op == "stripe":
        return stripe_noise(image, p["period_px"], p["amplitude"], p.get("orientation", "horizontal"))
    if spec.op == "spatial_filter":
        rng = None
        if p["mode"] == "pixel_corrupt":
            rng = np.random.Generator(np.random.Philox(p["seed"]))
        return spatial_filter(image, p["mode"], p.get("kernel", 3), p.get("fraction", 0.01), rng)
    if spec.op == "hist_eq":
        return hist_eq(image)
    if spec.op == "contrast_stretch":
        return contrast_stretch(image, p["low_pct"], p["high_pct"])
    if spec.op == "color_grade":
        return color_grade(image, tuple(p["gains"]))
    raise ValueError(f"unknown op {spec.op!r}")


def _draw_params(op: str, rng: np.random.Generator, ranges: dict) -> dict:
    if op == "stripe":
        lo, hi = ranges["stripe_period"]
        alo, ahi = ranges["stripe_amplitude"]
        return {
            "period_px": int(rng.integers(lo, hi + 1)),
            "amplitude": int(rng.integers(alo, ahi + 1)),
            "orientation": "horizontal",
        }
    if op == "spatial_filter":
        mode = ("box_blur", "gaussian_blur", "pixel_corrupt")[int(rng.integers(3))]
        if mode == "pixel_corrupt":
            flo, fhi = ranges["corrupt_fraction"]
            return {
                "mode": mode,
                "fraction": float(rng.uniform(flo, fhi)),
                "seed": int(rng.integers(2**63)),
            }
        kernels = ranges["blur_kernels"]
        return {"mode": mode, "kernel": int(kernels[int(rng.integers(len(kernels)))])}
    if op == "hist_eq":
        return {}
    if op == "contrast_stretch":
        low, high = ranges["stretch_percentiles"]
        return {"low_pct": float(low), "high_pct": float(high)}
    if op == "color_grade":
        glo, ghi = ranges["gain"]
        return {"gains": [float(rng.uniform(glo, ghi)) for _ in range(3)]}
    raise ValueError(op)


def apply_bundle(
    image: np.ndarray,
    family: str,
    rng: np.random.Generator,
    ranges: dict | None = None,
) -> tuple[np.ndarray, list[DegradationSpec]]:
    """Draw 1 or 2 distinct ops from the family and apply them in draw order.

    Returns the degraded image and the applied specs for provenance logging
    and exact replay.
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {sorted(FAMILIES)}, got {family!r}")
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    ops = FAMILIES[family]
    count = 1 + int(rng.integers(2))
    chosen = [ops[i] for i in rng.permutation(len(ops))[:count]]
    specs = []
    out = image
    for op in chosen:
        spec = DegradationSpec(family=family, op=op, params=_draw_params(op, rng, ranges))
        out = apply_spec(out, spec)
        specs.append(spec)
    return out, specs
