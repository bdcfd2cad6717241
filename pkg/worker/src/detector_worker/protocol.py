"""Newline-delimited JSON stdio server, protocol version 1.

One request line, one response line, in request order. A handshake declaring
the protocol version opens the session; version mismatch answers an error and
exits cleanly. Malformed requests get {"ok": false, ...} responses, never a
crash.
"""

from __future__ import annotations

import base64
import json
import sys
import traceback

import numpy as np

from detector_worker.model import LOSS_TERMS, WorkerDetector

PROTOCOL_VERSION = "1"


def _decode_image(req: dict) -> np.ndarray:
    h, w = int(req["h"]), int(req["w"])
    raw = base64.b64decode(req["image"])
    expected = h * w * 3 * 4
    if len(raw) != expected:
        raise ValueError(f"image payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=np.float32).reshape(h, w, 3).copy()


def handle_request(detector: WorkerDetector, req: dict) -> tuple[dict, bool]:
    """Returns (response, keep_running)."""
    op = req.get("op")
    if op == "handshake":
        if req.get("protocol") != PROTOCOL_VERSION:
            return (
                {
                    "ok": False,
                    "error": f"protocol mismatch: worker speaks {PROTOCOL_VERSION}, "
                    f"client sent {req.get('protocol')!r}",
                },
                False,
            )
        return (
            {
                "ok": True,
                "protocol": PROTOCOL_VERSION,
                "model": f"fasterrcnn-tiny-{detector.meta.get('digest', 'unknown')}",
                "loss_terms": list(LOSS_TERMS),
                "val_recall": detector.meta.get("val_recall"),
            },
            True,
        )
    if op == "detect":
        image = _decode_image(req)
        threshold = float(req.get("confidence_threshold", 0.5))
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"confidence threshold {threshold} outside [0, 1]")
        return {"ok": True, "detections": detector.detect(image, threshold)}, True
    if op == "loss":
        image = _decode_image(req)
        return {"ok": True, "loss": detector.loss(image, req.get("targets", []))}, True
    if op == "loss_gradient":
        image = _decode_image(req)
        grad = detector.loss_gradient(image, req.get("targets", []))
        payload = base64.b64encode(grad.astype(np.float32).tobytes()).decode("ascii")
        return {"ok": True, "gradient": payload}, True
    return {"ok": False, "error": f"unknown op {op!r}"}, True


def serve(detector: WorkerDetector, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer

    def reply(payload: dict) -> None:
        stdout.write(json.dumps(payload).encode() + b"\n")
        stdout.flush()

    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            reply({"ok": False, "error": f"malformed JSON request: {exc}"})
            continue
        try:
            response, keep_running = handle_request(detector, req)
        except Exception as exc:  # noqa: BLE001 - must answer, never crash
            reply(
                {
                    "ok": False,
                    "error": f"{type(exc).__name__}: {exc}",
                    "trace": traceback.format_exc(limit=3),
                }
            )
            continue
        reply(response)
        if not keep_running:
            return 0
    return 0
