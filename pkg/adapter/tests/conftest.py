from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

REPO_ROOT = Path(__file__).resolve().parents[2]
TRANSCRIPTS = REPO_ROOT / "protocol" / "transcripts"


@pytest.fixture
def null_stub_model(tmp_path) -> Path:
    path = tmp_path / "stub.json"
    path.write_text(json.dumps({"kind": "stub", "detections": []}), encoding="utf-8")
    return path


@pytest.fixture
def blob_model(tmp_path) -> Path:
    path = tmp_path / "blob.json"
    path.write_text(
        json.dumps({"kind": "blob", "threshold": 128, "min_size": 4, "score": 0.9}),
        encoding="utf-8",
    )
    return path


def serve_cmd(model: Path, *extra: str) -> list[str]:
    return [sys.executable, "-m", "yolo_adapter", "serve", "--model", str(model), *extra]


def write_scene_dataset(root: Path, n_images: int, size: int = 640, seed: int = 0) -> Path:
    """White rectangles on black with YOLO labels; no survkit involved."""
    rng = np.random.default_rng(seed)
    (root / "test" / "images").mkdir(parents=True)
    (root / "test" / "labels").mkdir(parents=True)
    for i in range(n_images):
        pixels = np.zeros((size, size, 3), np.uint8)
        rects = []
        for _ in range(int(rng.integers(3, 7))):
            for _attempt in range(50):
                w = int(rng.integers(30, 81))
                h = int(rng.integers(30, 81))
                x0 = int(rng.integers(0, size - w))
                y0 = int(rng.integers(0, size - h))
                grown = (x0 - 3, y0 - 3, x0 + w + 3, y0 + h + 3)
                if not any(
                    min(grown[2], r[2]) > max(grown[0], r[0])
                    and min(grown[3], r[3]) > max(grown[1], r[1])
                    for r in rects
                ):
                    rects.append((x0, y0, x0 + w, y0 + h))
                    pixels[y0 : y0 + h, x0 : x0 + w] = 255
                    break
        stem = f"scene_{i:04d}"
        Image.fromarray(pixels).save(root / "test" / "images" / f"{stem}.png")
        lines = []
        for x0, y0, x1, y1 in rects:
            lines.append(
                f"0 {(x0 + x1) / 2 / size:.6f} {(y0 + y1) / 2 / size:.6f} "
                f"{(x1 - x0) / size:.6f} {(y1 - y0) / size:.6f}\n"
            )
        (root / "test" / "labels" / f"{stem}.txt").write_text("".join(lines), encoding="utf-8")
    return root
