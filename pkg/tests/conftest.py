from __future__ import annotations

import hashlib
import sys
import zlib
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

FIXTURES = Path(__file__).parent / "fixtures"
TRANSCRIPTS = Path(__file__).parent.parent / "protocol" / "transcripts"


def synth_image(
    rng: np.random.Generator,
    size_hw: tuple[int, int] = (64, 64),
    n_boxes: tuple[int, int] = (1, 3),
    box_side: tuple[int, int] = (12, 28),
) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """Textured gray frame with solid colored rectangles as objects."""
    height, width = size_hw
    pixels = rng.integers(90, 166, size=(height, width, 3)).astype(np.uint8)
    rects = []
    for _ in range(int(rng.integers(n_boxes[0], n_boxes[1] + 1))):
        w = int(rng.integers(box_side[0], min(box_side[1], width - 1) + 1))
        h = int(rng.integers(box_side[0], min(box_side[1], height - 1) + 1))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        color = rng.integers(30, 226, size=3)
        pixels[y0 : y0 + h, x0 : x0 + w] = color
        rects.append((x0, y0, x0 + w, y0 + h))
    return pixels, rects


def label_lines(rects, size_hw) -> str:
    height, width = size_hw
    lines = []
    for x0, y0, x1, y1 in rects:
        # Quantize in micro-units and clamp the extent so the 6-decimal text
        # never overflows the unit frame (same contract as production labels).
        mcx = round((x0 + x1) / 2 / width * 1e6)
        mcy = round((y0 + y1) / 2 / height * 1e6)
        mw = min(round((x1 - x0) / width * 1e6), 2 * min(mcx, 10**6 - mcx))
        mh = min(round((y1 - y0) / height * 1e6), 2 * min(mcy, 10**6 - mcy))
        lines.append(f"0 {mcx / 1e6:.6f} {mcy / 1e6:.6f} {mw / 1e6:.6f} {mh / 1e6:.6f}\n")
    return "".join(lines)


def build_dataset(
    root: Path,
    subsets: dict[str, int],
    size_hw: tuple[int, int] = (64, 64),
    seed: int = 0,
    class_names: tuple[str, ...] = ("child",),
) -> Path:
    """Write a synthetic YOLO dataset tree: root/<subset>/{images,labels}."""
    import json

    for subset, count in subsets.items():
        images_dir = root / subset / "images"
        labels_dir = root / subset / "labels"
        images_dir.mkdir(parents=True, exist_ok=True)
        labels_dir.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            # zlib.crc32, not hash(): string hashing is salted per process
            # and fixture datasets must be identical across pytest runs.
            rng = np.random.default_rng((seed, zlib.crc32(subset.encode()) & 0xFFFF, i))
            pixels, rects = synth_image(rng, size_hw)
            stem = f"{subset}_{i:05d}"
            Image.fromarray(pixels).save(images_dir / f"{stem}.png")
            (labels_dir / f"{stem}.txt").write_text(label_lines(rects, size_hw), encoding="utf-8")
    (root / "manifest.json").write_text(
        json.dumps(
            {
                "class_names": list(class_names),
                "subsets": {
                    s: {"images": f"{s}/images", "labels": f"{s}/labels"} for s in subsets
                },
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return root


def tree_digest(root: Path) -> dict[str, str]:
    """Relative path -> sha256 of content, for byte-identity comparisons."""
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


@pytest.fixture
def small_dataset(tmp_path) -> Path:
    return build_dataset(tmp_path / "data", {"train": 12, "test": 4}, seed=7)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion, uncaptured."""
    try:
        import test_acceptance
    except ImportError:
        return
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok in test_acceptance.RESULTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")


@pytest.fixture
def echo_backend_cmd() -> list[str]:
    return [sys.executable, str(FIXTURES / "echo_backend.py")]


@pytest.fixture
def fixed_box_backend_cmd() -> list[str]:
    return [sys.executable, str(FIXTURES / "fixed_box_backend.py")]


@pytest.fixture
def swapped_order_backend_cmd() -> list[str]:
    return [sys.executable, str(FIXTURES / "swapped_order_backend.py")]
