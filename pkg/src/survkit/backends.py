"""Pluggable detector backends.

Real models run out-of-process behind a newline-delimited JSON protocol on
the child's standard streams (see PROTOCOL.md at the repo root): the backend
emits one capabilities line, then answers one response line per request.
Responses may arrive out of order and are matched by request_id.

For tests and recall experiments there are in-process synthetic backends,
chiefly the myopic detector: it reports a ground-truth box only when the
box's smaller side reaches a fraction of the inference frame's smaller
dimension. This is the small-object failure mode that sliced inference corrects,
since the same pixel box passes the check on a small slice and fails it on
the full frame.
"""

from __future__ import annotations

import base64
import io
import json
import math
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from ._rng import derive_rng
from .errors import BackendError, ProtocolError
from .slicer import Detection

PROTOCOL_VERSION = 1
DEFAULT_MAX_IMAGE_SIDE = 8192

Rect = tuple[float, float, float, float]


@dataclass(frozen=True)
class InferenceFrame:
    """One view handed to a backend: pixels plus where the view came from.

    Wire backends only consume the pixels; synthetic backends may use the
    scene id and region to look up ground truth.
    """

    pixels: np.ndarray  # H×W×3 uint8
    image_id: str | None = None
    region: tuple[int, int, int, int] | None = None  # view rect within the scene


class DetectorBackend(Protocol):
    def detect(self, frame: InferenceFrame) -> list[Detection]: ...


# ---------------------------------------------------------------------------
# Wire format


@dataclass(frozen=True)
class Capabilities:
    protocol_version: int
    max_image_side: int = DEFAULT_MAX_IMAGE_SIDE
    backend: str = ""


@dataclass(frozen=True)
class DetectRequest:
    request_id: str
    width: int
    height: int
    image_path: str | None = None
    image_png_base64: str | None = None

    def __post_init__(self) -> None:
        if (self.image_path is None) == (self.image_png_base64 is None):
            raise ValueError("exactly one of image_path / image_png_base64 must be set")


@dataclass(frozen=True)
class DetectResponse:
    request_id: str | None
    detections: list[Detection] = field(default_factory=list)
    error: str | None = None


def encode_capabilities(caps: Capabilities) -> str:
    return json.dumps(
        {
            "type": "capabilities",
            "protocol_version": caps.protocol_version,
            "max_image_side": caps.max_image_side,
            "backend": caps.backend,
        },
        sort_keys=True,
    )


def parse_capabilities(line: str) -> Capabilities:
    doc = _parse_json_line(line)
    if doc.get("type") != "capabilities":
        raise ProtocolError(f"expected capabilities line, got {doc.get('type')!r}")
    try:
        return Capabilities(
            protocol_version=int(doc["protocol_version"]),
            max_image_side=int(doc.get("max_image_side", DEFAULT_MAX_IMAGE_SIDE)),
            backend=str(doc.get("backend", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad capabilities line: {exc}") from exc


def encode_detect_request(req: DetectRequest) -> str:
    doc: dict = {
        "type": "detect",
        "request_id": req.request_id,
        "width": req.width,
        "height": req.height,
    }
    if req.image_path is not None:
        doc["image_path"] = req.image_path
    else:
        doc["image_png_base64"] = req.image_png_base64
    return json.dumps(doc, sort_keys=True)


def parse_detect_request(line: str) -> DetectRequest:
    doc = _parse_json_line(line)
    if doc.get("type") != "detect":
        raise ProtocolError(f"expected detect request, got {doc.get('type')!r}")
    try:
        return DetectRequest(
            request_id=str(doc["request_id"]),
            width=int(doc["width"]),
            height=int(doc["height"]),
            image_path=doc.get("image_path"),
            image_png_base64=doc.get("image_png_base64"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad detect request: {exc}") from exc


def encode_detect_response(resp: DetectResponse) -> str:
    return json.dumps(
        {
            "type": "detections",
            "request_id": resp.request_id,
            "detections": [
                {
                    "box": [float(v) for v in d.box],
                    "score": float(d.score),
                    "class_id": int(d.class_id),
                }
                for d in resp.detections
            ],
            "error": resp.error,
        },
        sort_keys=True,
    )


def parse_detect_response(line: str) -> DetectResponse:
    doc = _parse_json_line(line)
    if doc.get("type") != "detections":
        raise ProtocolError(f"expected detections line, got {doc.get('type')!r}")
    try:
        dets = [
            Detection(
                box=tuple(float(v) for v in d["box"]),
                score=float(d["score"]),
                class_id=int(d.get("class_id", 0)),
            )
            for d in doc.get("detections", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad detection entry: {exc}") from exc
    rid = doc.get("request_id")
    return DetectResponse(
        request_id=None if rid is None else str(rid),
        detections=dets,
        error=doc.get("error"),
    )


def _parse_json_line(line: str) -> dict:
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"not a JSON line: {line[:80]!r}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError(f"expected a JSON object, got {type(doc).__name__}")
    return doc


# ---------------------------------------------------------------------------
# External process backend


class ExternalBackend:
    """Client for a detector served over the stdio JSON-lines protocol.

    Multiple requests may be in flight; a reader thread files responses by
    request_id, so out-of-order backends work. `transfer` picks how image
    data travels: "path" writes temporary PNGs on the shared filesystem,
    "base64" inlines them for sandboxed backends.
    """

    def __init__(
        self,
        command: list[str] | str,
        timeout: float = 30.0,
        transfer: str = "path",
    ):
        if transfer not in ("path", "base64"):
            raise ValueError(f"transfer must be 'path' or 'base64', got {transfer!r}")
        self.command = command
        self.timeout = timeout
        self.transfer = transfer
        self.capabilities: Capabilities | None = None
        self._proc: subprocess.Popen | None = None
        self._tmpdir: tempfile.TemporaryDirectory | None = None
        self._counter = 0
        self._write_lock = threading.Lock()
        self._cond = threading.Condition()
        self._responses: dict[str, DetectResponse] = {}
        self._fatal: str | None = None
        self._pending: dict[str, DetectRequest] = {}

    def __enter__(self) -> "ExternalBackend":
        self.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def start(self) -> Capabilities:
        if self._proc is not None:
            raise BackendError("backend already started")
        shell = isinstance(self.command, str)
        try:
            self._proc = subprocess.Popen(
                self.command,
                shell=shell,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise BackendError(f"cannot start backend {self.command!r}: {exc}") from exc
        self._tmpdir = tempfile.TemporaryDirectory(prefix="survkit-backend-")
        first = self._readline_with_timeout()
        self.capabilities = parse_capabilities(first)
        if self.capabilities.protocol_version != PROTOCOL_VERSION:
            self.close()
            raise ProtocolError(
                f"protocol version mismatch: backend speaks "
                f"{self.capabilities.protocol_version}, client speaks {PROTOCOL_VERSION}"
            )
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        return self.capabilities

    def _readline_with_timeout(self) -> str:
        assert self._proc is not None and self._proc.stdout is not None
        result: list[str] = []

        def _read():
            result.append(self._proc.stdout.readline())

        t = threading.Thread(target=_read, daemon=True)
        t.start()
        t.join(self.timeout)
        if t.is_alive() or not result or not result[0]:
            self.close()
            raise BackendError("backend produced no handshake line")
        return result[0]

    def _read_loop(self) -> None:
        assert self._proc is not None and self._proc.stdout is not None
        for line in self._proc.stdout:
            if not line.strip():
                continue
            try:
                resp = parse_detect_response(line)
            except ProtocolError as exc:
                with self._cond:
                    self._fatal = str(exc)
                    self._cond.notify_all()
                return
            with self._cond:
                self._responses[resp.request_id or ""] = resp
                self._cond.notify_all()
        with self._cond:
            if self._fatal is None:
                self._fatal = "backend closed its output stream"
            self._cond.notify_all()

    def submit(self, frame: InferenceFrame) -> str:
        if self._proc is None or self._proc.stdin is None:
            raise BackendError("backend not started")
        height, width = frame.pixels.shape[:2]
        with self._write_lock:
            self._counter += 1
            request_id = f"q{self._counter:06d}"
            if self.transfer == "path":
                path = Path(self._tmpdir.name) / f"{request_id}.png"
                Image.fromarray(frame.pixels).save(path)
                req = DetectRequest(request_id=request_id, width=width, height=height, image_path=str(path))
            else:
                buf = io.BytesIO()
                Image.fromarray(frame.pixels).save(buf, format="PNG")
                payload = base64.b64encode(buf.getvalue()).decode("ascii")
                req = DetectRequest(
                    request_id=request_id, width=width, height=height, image_png_base64=payload
                )
            self._pending[request_id] = req
            try:
                self._proc.stdin.write(encode_detect_request(req) + "\n")
                self._proc.stdin.flush()
            except (OSError, ValueError) as exc:  # ValueError: closed text pipe
                raise BackendError(f"backend pipe closed: {exc}") from exc
        return request_id

    def collect(self, request_id: str) -> list[Detection]:
        if request_id not in self._pending:
            raise ProtocolError(f"unknown request id {request_id!r}")
        deadline = time.monotonic() + self.timeout
        with self._cond:
            while request_id not in self._responses:
                if self._fatal is not None:
                    raise BackendError(f"backend failed: {self._fatal}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise BackendError(f"timeout waiting for response to {request_id}")
                self._cond.wait(remaining)
            resp = self._responses.pop(request_id)
        req = self._pending.pop(request_id)
        if req.image_path is not None:
            Path(req.image_path).unlink(missing_ok=True)
        if resp.error:
            raise BackendError(f"backend error for {request_id}: {resp.error}")
        for det in resp.detections:
            x0, y0, x1, y1 = det.box
            if x0 < 0 or y0 < 0 or x1 > req.width or y1 > req.height:
                raise ProtocolError(
                    f"detection {det.box} outside declared {req.width}×{req.height} frame"
                )
        return resp.detections

    def detect(self, frame: InferenceFrame) -> list[Detection]:
        return self.collect(self.submit(frame))

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is not None:
            try:
                if proc.stdin is not None:
                    proc.stdin.close()
                proc.wait(timeout=5.0)
            except (OSError, subprocess.TimeoutExpired):
                proc.kill()
                proc.wait()
        if self._tmpdir is not None:
            self._tmpdir.cleanup()
            self._tmpdir = None


# ---------------------------------------------------------------------------
# Synthetic backends


@dataclass
class MyopicDetectorSpec:
    """Threshold model of a detector that misses small objects.

    ground_truth maps image id -> pixel rects in the original frame.
    A box is reported iff min(w, h) >= visibility_threshold · min(H, W) of
    the frame it is inferred on.
    """

    ground_truth: dict[str, list[Rect]]
    visibility_threshold: float
    score_noise: float = 0.0
    miss_prob: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.visibility_threshold < 1.0:
            raise ValueError(f"visibility threshold must be in (0,1), got {self.visibility_threshold}")
        if not 0.0 <= self.score_noise <= 0.2:
            raise ValueError(f"score noise must be in [0, 0.2], got {self.score_noise}")
        if not 0.0 <= self.miss_prob <= 1.0:
            raise ValueError(f"miss probability must be in [0, 1], got {self.miss_prob}")


def detect_myopic(
    spec: MyopicDetectorSpec,
    frame_hw: tuple[int, int],
    visible_gt: list[Rect],
    rng: np.random.Generator | None = None,
) -> list[Detection]:
    """Pure threshold detector over ground truth visible in the frame.

    With miss_prob = 0 and score_noise = 0 no randomness is consumed at all.
    """
    min_side_needed = spec.visibility_threshold * min(frame_hw)
    out: list[Detection] = []
    for rect in visible_gt:
        x0, y0, x1, y1 = rect
        if min(x1 - x0, y1 - y0) < min_side_needed:
            continue
        if spec.miss_prob > 0.0:
            if rng is None:
                raise ValueError("miss_prob > 0 needs an rng")
            if rng.random() < spec.miss_prob:
                continue
        score = 1.0
        if spec.score_noise > 0.0:
            if rng is None:
                raise ValueError("score_noise > 0 needs an rng")
            score = 1.0 - spec.score_noise * float(rng.random())
        out.append(Detection(box=rect, score=score))
    return out


class MyopicBackend:
    """DetectorBackend wrapper: looks up the scene's ground truth, clips it
    to the view, and runs the threshold model on the clipped boxes."""

    def __init__(self, spec: MyopicDetectorSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed

    def detect(self, frame: InferenceFrame) -> list[Detection]:
        if frame.image_id is None:
            raise BackendError("myopic backend needs frame.image_id to find ground truth")
        gt = self.spec.ground_truth.get(frame.image_id, [])
        height, width = frame.pixels.shape[:2]
        rx0, ry0 = frame.region[:2] if frame.region else (0, 0)
        visible: list[Rect] = []
        for x0, y0, x1, y1 in gt:
            vx0, vy0 = max(x0 - rx0, 0.0), max(y0 - ry0, 0.0)
            vx1, vy1 = min(x1 - rx0, width), min(y1 - ry0, height)
            if vx1 > vx0 and vy1 > vy0:
                visible.append((vx0, vy0, vx1, vy1))
        rng = derive_rng(self.seed, "myopic", frame.image_id, frame.region)
        return detect_myopic(self.spec, (height, width), visible, rng)


# ---------------------------------------------------------------------------
# Synthetic scenes (white rectangles on black) for recall experiments


def generate_scene(
    rng: np.random.Generator,
    frame_hw: tuple[int, int],
    n_boxes: int,
    side_range: tuple[int, int],
    small_fraction: float = 0.0,
    small_side_range: tuple[int, int] | None = None,
    margin: int = 2,
    max_attempts: int = 200,
) -> list[Rect]:
    """Non-touching axis-aligned boxes; a fraction drawn from a smaller range."""
    height, width = frame_hw
    rects: list[Rect] = []
    for i in range(n_boxes):
        use_small = small_side_range is not None and i < math.ceil(small_fraction * n_boxes)
        lo, hi = small_side_range if use_small else side_range
        for _ in range(max_attempts):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, max(1, width - w)))
            y0 = int(rng.integers(0, max(1, height - h)))
            rect = (float(x0), float(y0), float(x0 + w), float(y0 + h))
            grown = (rect[0] - margin, rect[1] - margin, rect[2] + margin, rect[3] + margin)
            if not any(
                min(grown[2], r[2]) > max(grown[0], r[0]) and min(grown[3], r[3]) > max(grown[1], r[1])
                for r in rects
            ):
                rects.append(rect)
                break
    return rects


def render_scene(frame_hw: tuple[int, int], rects: list[Rect]) -> np.ndarray:
    """White rectangles on black, trivially recoverable by pixel detectors."""
    height, width = frame_hw
    pixels = np.zeros((height, width, 3), dtype=np.uint8)
    for x0, y0, x1, y1 in rects:
        pixels[int(y0) : int(y1), int(x0) : int(x1)] = 255
    return pixels


# ---------------------------------------------------------------------------
# Golden transcript conformance


def load_transcript(path: Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "exchanges" not in doc:
        raise ProtocolError(f"{path}: transcript needs an 'exchanges' array")
    return doc


def run_transcript(command: list[str] | str, transcript_path: Path, timeout: float = 30.0) -> list[str]:
    """Replay one golden transcript against a backend command.

    Returns a list of mismatch descriptions; an empty list means the backend
    conforms. Transcripts assume null-model semantics (a backend configured
    to return zero detections), so they are model-independent.
    """
    doc = load_transcript(transcript_path)
    failures: list[str] = []
    shell = isinstance(command, str)
    proc = subprocess.Popen(
        command, shell=shell, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
    )
    try:
        line = _read_with_deadline(proc, timeout)
        if line is None:
            return [f"{doc.get('name', transcript_path)}: no handshake line"]
        try:
            caps = parse_capabilities(line)
        except ProtocolError as exc:
            return [f"handshake: {exc}"]
        for key, expected in doc.get("capabilities", {}).items():
            actual = getattr(caps, key, None)
            if actual != expected:
                failures.append(f"capabilities.{key}: expected {expected!r}, got {actual!r}")

        exchanges = doc["exchanges"]
        for ex in exchanges:
            payload = ex["send_raw"] if "send_raw" in ex else json.dumps(ex["send"], sort_keys=True)
            proc.stdin.write(payload + "\n")
        proc.stdin.flush()

        got: list[DetectResponse] = []
        for _ in exchanges:
            line = _read_with_deadline(proc, timeout)
            if line is None:
                failures.append(f"backend answered {len(got)}/{len(exchanges)} exchanges")
                break
            try:
                got.append(parse_detect_response(line))
            except ProtocolError as exc:
                failures.append(f"unparseable response: {exc}")
        by_id: dict[str | None, list[DetectResponse]] = {}
        for resp in got:
            by_id.setdefault(resp.request_id, []).append(resp)
        for ex in exchanges:
            expect = ex["expect"]
            rid = expect.get("request_id")
            bucket = by_id.get(rid, [])
            if not bucket:
                failures.append(f"no response for request_id {rid!r}")
                continue
            resp = bucket.pop(0)
            failures.extend(_compare_response(rid, resp, expect))

        proc.stdin.close()
        try:
            code = proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            failures.append("backend did not exit after input close")
        else:
            if code != 0:
                failures.append(f"backend exit code {code} after input close (expected 0)")
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    return failures


def _compare_response(rid: str | None, resp: DetectResponse, expect: dict) -> list[str]:
    failures = []
    if bool(expect.get("error_expected", False)) != bool(resp.error):
        failures.append(
            f"{rid}: error_expected={expect.get('error_expected', False)} but error={resp.error!r}"
        )
    expected_dets = expect.get("detections", [])
    if len(expected_dets) != len(resp.detections):
        failures.append(f"{rid}: expected {len(expected_dets)} detections, got {len(resp.detections)}")
        return failures
    for want, have in zip(expected_dets, resp.detections):
        if any(abs(a - b) > 1e-6 for a, b in zip(want["box"], have.box)):
            failures.append(f"{rid}: box {have.box} != {want['box']}")
        if abs(want["score"] - have.score) > 1e-6:
            failures.append(f"{rid}: score {have.score} != {want['score']}")
        if int(want.get("class_id", 0)) != have.class_id:
            failures.append(f"{rid}: class {have.class_id} != {want.get('class_id', 0)}")
    return failures


def _read_with_deadline(proc: subprocess.Popen, timeout: float) -> str | None:
    result: list[str] = []

    def _read():
        result.append(proc.stdout.readline())

    t = threading.Thread(target=_read, daemon=True)
    t.start()
    t.join(timeout)
    if t.is_alive() or not result or not result[0]:
        return None
    return result[0]
