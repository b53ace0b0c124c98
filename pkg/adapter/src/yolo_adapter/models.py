"""Model loading and inference.

A model file is either a JSON descriptor or a TorchScript export:

* ``{"kind": "stub", "detections": [[x0, y0, x1, y1, score, class_id], ...]}``
  answers every request with the canned list; protocol conformance runs use
  an empty list.
* ``{"kind": "blob", "threshold": 128, "min_size": 4, "score": 0.9}``
  detects connected bright regions (mean channel value above the
  threshold) and boxes each component, a real pixel detector that needs
  no weights, handy for end-to-end pipeline runs on synthetic scenes.
* ``*.pt`` / ``*.ts`` files load with ``torch.jit.load``; the module must
  accept a float (1, 3, H, W) tensor scaled to [0, 1] and return a dict (or
  tuple) with ``boxes`` (N, 4 xyxy pixels), ``scores`` (N,), ``labels`` (N,)
  (the shape torchvision detection exports produce).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np


class Detection(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float
    score: float
    class_id: int


class DetectionModel(Protocol):
    name: str

    def detect(self, pixels: np.ndarray) -> list[Detection]: ...


class StubModel:
    def __init__(self, detections: list[list[float]]):
        self.name = "stub"
        self._canned = [
            Detection(float(d[0]), float(d[1]), float(d[2]), float(d[3]), float(d[4]), int(d[5]))
            for d in detections
        ]

    def detect(self, pixels: np.ndarray) -> list[Detection]:
        return list(self._canned)


class BlobModel:
    """Bright connected components on a dark background, 4-connected."""

    def __init__(self, threshold: float = 128.0, min_size: int = 4, score: float = 0.9):
        self.name = "blob"
        self.threshold = threshold
        self.min_size = min_size
        self.score = score

    def detect(self, pixels: np.ndarray) -> list[Detection]:
        mask = pixels.astype(np.float32).mean(axis=2) > self.threshold
        height, width = mask.shape
        seen = np.zeros_like(mask, dtype=bool)
        out: list[Detection] = []
        for sy, sx in zip(*np.nonzero(mask)):
            if seen[sy, sx]:
                continue
            stack = [(int(sy), int(sx))]
            seen[sy, sx] = True
            y_min = y_max = int(sy)
            x_min = x_max = int(sx)
            while stack:
                y, x = stack.pop()
                y_min, y_max = min(y_min, y), max(y_max, y)
                x_min, x_max = min(x_min, x), max(x_max, x)
                for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                    if 0 <= ny < height and 0 <= nx < width and mask[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        stack.append((ny, nx))
            w, h = x_max - x_min + 1, y_max - y_min + 1
            if min(w, h) >= self.min_size:
                out.append(
                    Detection(float(x_min), float(y_min), float(x_max + 1), float(y_max + 1), self.score, 0)
                )
        out.sort(key=lambda d: (d.y0, d.x0))
        return out


class TorchscriptModel:
    def __init__(self, path: Path, device: str = "cpu"):
        import torch  # deferred: only this model kind needs it

        self.name = "torchscript"
        self._torch = torch
        self._device = device
        self._module = torch.jit.load(str(path), map_location=device)
        self._module.eval()

    def detect(self, pixels: np.ndarray) -> list[Detection]:
        torch = self._torch
        tensor = (
            torch.from_numpy(pixels.astype(np.float32) / 255.0)
            .permute(2, 0, 1)
            .unsqueeze(0)
            .to(self._device)
        )
        with torch.no_grad():
            result = self._module(tensor)
        if isinstance(result, (tuple, list)):
            boxes, scores, labels = result[0], result[1], result[2]
        else:
            boxes, scores, labels = result["boxes"], result["scores"], result["labels"]
        out = []
        for box, score, label in zip(boxes.tolist(), scores.tolist(), labels.tolist()):
            out.append(Detection(box[0], box[1], box[2], box[3], float(score), int(label)))
        return out


def load_model(path: Path, device: str = "cpu") -> DetectionModel:
    path = Path(path)
    if path.suffix in (".pt", ".ts"):
        return TorchscriptModel(path, device=device)
    doc = json.loads(path.read_text(encoding="utf-8"))
    kind = doc.get("kind")
    if kind == "stub":
        return StubModel(doc.get("detections", []))
    if kind == "blob":
        return BlobModel(
            threshold=float(doc.get("threshold", 128.0)),
            min_size=int(doc.get("min_size", 4)),
            score=float(doc.get("score", 0.9)),
        )
    raise ValueError(f"unknown model kind {kind!r} in {path}")
