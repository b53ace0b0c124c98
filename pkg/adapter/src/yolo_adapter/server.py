"""The serving loop: capabilities handshake, then one response per line.

Request handling is serial and order-preserving. Per-request failures are
answered with an error field and never kill the process; only a model that
fails to load is fatal.
"""

from __future__ import annotations

import base64
import io
import json
import sys
from typing import TextIO

import numpy as np
from PIL import Image

from . import PROTOCOL_VERSION
from .config import AdapterConfig
from .models import Detection, DetectionModel, load_model


def _emit(stream: TextIO, doc: dict) -> None:
    stream.write(json.dumps(doc, sort_keys=True) + "\n")
    stream.flush()


def _response(request_id, detections: list[Detection] | None = None, error: str | None = None) -> dict:
    return {
        "type": "detections",
        "request_id": request_id,
        "detections": [
            {"box": [d.x0, d.y0, d.x1, d.y1], "score": d.score, "class_id": d.class_id}
            for d in (detections or [])
        ],
        "error": error,
    }


def _load_pixels(doc: dict) -> np.ndarray:
    path = doc.get("image_path")
    payload = doc.get("image_png_base64")
    if (path is None) == (payload is None):
        raise ValueError("need exactly one of image_path / image_png_base64")
    if path is not None:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    raw = base64.b64decode(payload, validate=True)
    with Image.open(io.BytesIO(raw)) as im:
        return np.asarray(im.convert("RGB"))


def _clip_to_frame(dets: list[Detection], width: int, height: int) -> list[Detection]:
    out = []
    for d in dets:
        x0, y0 = max(d.x0, 0.0), max(d.y0, 0.0)
        x1, y1 = min(d.x1, float(width)), min(d.y1, float(height))
        if x1 > x0 and y1 > y0:
            out.append(Detection(x0, y0, x1, y1, d.score, d.class_id))
    return out


def handle_line(line: str, model: DetectionModel, config: AdapterConfig) -> dict:
    try:
        doc = json.loads(line)
        if not isinstance(doc, dict):
            raise ValueError("not a JSON object")
    except ValueError as exc:
        return _response(None, error=f"malformed line: {exc}")
    request_id = doc.get("request_id")
    if doc.get("type") != "detect":
        return _response(request_id, error=f"unexpected message type {doc.get('type')!r}")
    try:
        width, height = int(doc["width"]), int(doc["height"])
    except (KeyError, TypeError, ValueError):
        return _response(request_id, error="missing or non-integer width/height")
    if max(width, height) > config.max_image_side:
        return _response(request_id, error=f"image side exceeds {config.max_image_side}")
    try:
        pixels = _load_pixels(doc)
    except (OSError, ValueError) as exc:
        return _response(request_id, error=f"cannot read image: {exc}")
    if pixels.shape[1] != width or pixels.shape[0] != height:
        return _response(
            request_id,
            error=f"declared {width}x{height} but image is {pixels.shape[1]}x{pixels.shape[0]}",
        )
    try:
        dets = [d for d in model.detect(pixels) if d.score >= config.confidence]
    except Exception as exc:  # model bugs must not kill the server
        return _response(request_id, error=f"inference failed: {exc}")
    return _response(request_id, _clip_to_frame(dets, width, height))


def serve(config: AdapterConfig, stdin: TextIO | None = None, stdout: TextIO | None = None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    try:
        model = load_model(config.model_path, device=config.device)
    except Exception as exc:
        _emit(stdout, {"type": "fatal", "error": f"cannot load model: {exc}"})
        return 2
    _emit(
        stdout,
        {
            "type": "capabilities",
            "protocol_version": config.protocol_version,
            "max_image_side": config.max_image_side,
            "backend": f"survkit-yolo-adapter/{model.name}",
        },
    )
    for line in stdin:
        if not line.strip():
            continue
        _emit(stdout, handle_line(line, model, config))
    return 0
