"""Protocol conformance: replay the golden transcripts against a backend.

By default the backend under test is this adapter itself, spawned with a
zero-detection stub model (the null-model semantics the transcripts
assume), so conformance never needs model weights. Transcript files live
next to PROTOCOL.md in the repo (`protocol/transcripts/`); their schema is
documented there.
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

TRANSCRIPTS_ENV = "SURVKIT_PROTOCOL_TRANSCRIPTS"
BOX_TOLERANCE = 1e-6


@dataclass
class TranscriptResult:
    name: str
    failures: list[str]

    @property
    def passed(self) -> bool:
        return not self.failures


def find_transcripts_dir(explicit: Path | None = None) -> Path:
    """Flag > environment > upward search for protocol/transcripts."""
    if explicit is not None:
        return Path(explicit)
    env = os.environ.get(TRANSCRIPTS_ENV)
    if env:
        return Path(env)
    probe = Path.cwd()
    for candidate in [probe, *probe.parents]:
        found = candidate / "protocol" / "transcripts"
        if found.is_dir():
            return found
    raise FileNotFoundError(
        f"no protocol/transcripts directory found; pass --transcripts or set {TRANSCRIPTS_ENV}"
    )


def _read_line(proc: subprocess.Popen, timeout: float) -> str | None:
    got: list[str] = []
    t = threading.Thread(target=lambda: got.append(proc.stdout.readline()), daemon=True)
    t.start()
    t.join(timeout)
    if t.is_alive() or not got or not got[0]:
        return None
    return got[0]


def _check_detections(rid, expected: list[dict], actual: list[dict], failures: list[str]) -> None:
    if len(expected) != len(actual):
        failures.append(f"{rid}: expected {len(expected)} detections, got {len(actual)}")
        return
    for want, have in zip(expected, actual):
        if any(abs(float(a) - float(b)) > BOX_TOLERANCE for a, b in zip(want["box"], have["box"])):
            failures.append(f"{rid}: box {have['box']} != {want['box']}")
        if abs(float(want["score"]) - float(have["score"])) > BOX_TOLERANCE:
            failures.append(f"{rid}: score {have['score']} != {want['score']}")
        if int(want.get("class_id", 0)) != int(have.get("class_id", 0)):
            failures.append(f"{rid}: class {have.get('class_id')} != {want.get('class_id', 0)}")


def replay_transcript(command: list[str], transcript_path: Path, timeout: float = 30.0) -> TranscriptResult:
    doc = json.loads(Path(transcript_path).read_text(encoding="utf-8"))
    name = doc.get("name", Path(transcript_path).stem)
    failures: list[str] = []
    proc = subprocess.Popen(
        command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
    )
    try:
        line = _read_line(proc, timeout)
        if line is None:
            return TranscriptResult(name, ["no handshake line"])
        try:
            caps = json.loads(line)
        except json.JSONDecodeError:
            return TranscriptResult(name, [f"handshake is not JSON: {line[:60]!r}"])
        if caps.get("type") != "capabilities":
            failures.append(f"first line type {caps.get('type')!r} != 'capabilities'")
        for key, expected in doc.get("capabilities", {}).items():
            if caps.get(key) != expected:
                failures.append(f"capabilities.{key}: expected {expected!r}, got {caps.get(key)!r}")

        exchanges = doc["exchanges"]
        for ex in exchanges:
            payload = ex["send_raw"] if "send_raw" in ex else json.dumps(ex["send"], sort_keys=True)
            proc.stdin.write(payload + "\n")
        proc.stdin.flush()

        responses = []
        for _ in exchanges:
            line = _read_line(proc, timeout)
            if line is None:
                failures.append(f"only {len(responses)}/{len(exchanges)} responses before EOF")
                break
            try:
                responses.append(json.loads(line))
            except json.JSONDecodeError:
                failures.append(f"response is not JSON: {line[:60]!r}")

        by_id: dict = {}
        for resp in responses:
            by_id.setdefault(resp.get("request_id"), []).append(resp)
        for ex in exchanges:
            expect = ex["expect"]
            rid = expect.get("request_id")
            bucket = by_id.get(rid, [])
            if not bucket:
                failures.append(f"no response for request_id {rid!r}")
                continue
            resp = bucket.pop(0)
            if bool(expect.get("error_expected", False)) != bool(resp.get("error")):
                failures.append(
                    f"{rid}: error_expected={expect.get('error_expected', False)} "
                    f"but error={resp.get('error')!r}"
                )
            _check_detections(rid, expect.get("detections", []), resp.get("detections", []), failures)

        proc.stdin.close()
        try:
            code = proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            failures.append("backend did not exit after input close")
        else:
            if code != 0:
                failures.append(f"exit code {code} after input close (expected 0)")
    finally:
        if proc.poll() is None:
            proc.kill()
            proc.wait()
    return TranscriptResult(name, failures)


def run_selfcheck(
    transcripts_dir: Path | None = None,
    command: list[str] | None = None,
    timeout: float = 30.0,
) -> list[TranscriptResult]:
    """Replay every transcript; default backend = this adapter + null stub."""
    directory = find_transcripts_dir(transcripts_dir)
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no transcript files in {directory}")
    results = []
    with tempfile.TemporaryDirectory(prefix="adapter-selfcheck-") as tmp:
        if command is None:
            stub = Path(tmp) / "null_stub.json"
            stub.write_text(json.dumps({"kind": "stub", "detections": []}), encoding="utf-8")
            command = [sys.executable, "-m", "yolo_adapter", "serve", "--model", str(stub)]
        for path in paths:
            results.append(replay_transcript(command, path, timeout=timeout))
    return results
