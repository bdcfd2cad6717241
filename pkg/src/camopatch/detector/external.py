"""Client for external detector workers.

Spawns the worker as a subprocess and speaks newline-delimited JSON over its
stdio: a version handshake, then one request line per detect / loss /
loss_gradient call, one response line each, in order. Images cross the
boundary as base64 row-major float32 H x W x 3 in [0, 255].
"""

from __future__ import annotations

import base64
import json
import os
import select
import shlex
import subprocess
from typing import Sequence

import numpy as np

from camopatch.detector.base import Detection
from camopatch.imaging import BoundingBox

PROTOCOL_VERSION = "1"
TIMEOUT_ENV = "CAMOPATCH_WORKER_TIMEOUT"
DEFAULT_TIMEOUT = 120.0


class WorkerTransportError(ConnectionError):
    """Worker unreachable / pipe broken / timeout: distinct from an error
    response and from an empty detection list."""


class WorkerRequestError(RuntimeError):
    """The worker answered ok=false."""


def _encode_image(image: np.ndarray) -> dict:
    image = np.ascontiguousarray(image, dtype=np.float32)
    return {
        "image": base64.b64encode(image.tobytes()).decode("ascii"),
        "h": int(image.shape[0]),
        "w": int(image.shape[1]),
    }


def _encode_targets(targets: Sequence[Detection]) -> list[dict]:
    return [
        {
            "x_min": float(d.box.x_min),
            "y_min": float(d.box.y_min),
            "x_max": float(d.box.x_max),
            "y_max": float(d.box.y_max),
            "class_id": int(d.class_id),
        }
        for d in targets
    ]


class ExternalDetector:
    """Handle over a detector worker subprocess."""

    kind = "external"

    def __init__(self, command: str, timeout: float | None = None):
        self.command = command
        self.timeout = (
            timeout
            if timeout is not None
            else float(os.environ.get(TIMEOUT_ENV, DEFAULT_TIMEOUT))
        )
        self._buffer = b""
        try:
            self._proc = subprocess.Popen(
                shlex.split(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise WorkerTransportError(f"failed to spawn worker {command!r}: {exc}")
        self.info = self._request({"op": "handshake", "protocol": PROTOCOL_VERSION})

    def _read_line(self) -> bytes:
        while b"\n" not in self._buffer:
            ready, _, _ = select.select([self._proc.stdout], [], [], self.timeout)
            if not ready:
                raise WorkerTransportError(
                    f"worker response timed out after {self.timeout}s"
                )
            chunk = os.read(self._proc.stdout.fileno(), 1 << 20)
            if not chunk:
                raise WorkerTransportError("worker closed its stdout")
            self._buffer += chunk
        line, self._buffer = self._buffer.split(b"\n", 1)
        return line

    def _request(self, payload: dict) -> dict:
        if self._proc.poll() is not None:
            raise WorkerTransportError(
                f"worker exited with code {self._proc.returncode}"
            )
        try:
            self._proc.stdin.write(json.dumps(payload).encode() + b"\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise WorkerTransportError(f"failed to write to worker: {exc}")
        line = self._read_line()
        try:
            response = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WorkerTransportError(f"malformed worker response: {exc}")
        if not response.get("ok", False):
            raise WorkerRequestError(response.get("error", "unknown worker error"))
        return response

    def detect(self, image: np.ndarray, confidence_threshold: float) -> list[Detection]:
        payload = {"op": "detect", "confidence_threshold": float(confidence_threshold)}
        payload.update(_encode_image(image))
        response = self._request(payload)
        out = []
        for d in response.get("detections", []):
            out.append(
                Detection(
                    box=BoundingBox(d["x_min"], d["y_min"], d["x_max"], d["y_max"]),
                    class_id=int(d["class_id"]),
                    confidence=float(d["confidence"]),
                )
            )
        return out

    def loss(self, image: np.ndarray, targets: Sequence[Detection]) -> float:
        payload = {"op": "loss", "targets": _encode_targets(targets)}
        payload.update(_encode_image(image))
        return float(self._request(payload)["loss"])

    def loss_gradient(self, image: np.ndarray, targets: Sequence[Detection]) -> np.ndarray:
        payload = {"op": "loss_gradient", "targets": _encode_targets(targets)}
        payload.update(_encode_image(image))
        response = self._request(payload)
        raw = base64.b64decode(response["gradient"])
        h, w = image.shape[0], image.shape[1]
        grad = np.frombuffer(raw, dtype=np.float32).reshape(h, w, 3)
        return grad.astype(np.float64)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
