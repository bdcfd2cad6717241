"""Detector-facing types and the operations shared by every handle.

A handle is anything with ``detect(image, confidence_threshold)``,
``loss(image, targets)`` and ``loss_gradient(image, targets)``; the built-in
toy network and the external subprocess client satisfy the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from camopatch.imaging import BoundingBox


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


class DetectorHandle(Protocol):
    def detect(self, image: np.ndarray, confidence_threshold: float) -> list[Detection]:
        ...

    def loss(self, image: np.ndarray, targets: Sequence[Detection]) -> float:
        ...

    def loss_gradient(self, image: np.ndarray, targets: Sequence[Detection]) -> np.ndarray:
        ...


def _box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def non_max_suppression(
    detections: Sequence[Detection], iou_threshold: float = 0.5
) -> list[Detection]:
    """Greedy per-class NMS. The candidate ordering is fully determined by
    (confidence, coordinates), so the output is invariant to input order."""
    ordered = sorted(
        detections,
        key=lambda d: (
            -d.confidence,
            d.box.x_min,
            d.box.y_min,
            d.box.x_max,
            d.box.y_max,
            d.class_id,
        ),
    )
    kept: list[Detection] = []
    for cand in ordered:
        suppressed = False
        for k in kept:
            if k.class_id == cand.class_id and _box_iou(k.box, cand.box) >= iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept


def detect(handle: DetectorHandle, image: np.ndarray, confidence_threshold: float) -> list[Detection]:
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValueError(f"confidence threshold {confidence_threshold} outside [0, 1]")
    return handle.detect(image, confidence_threshold)


def detection_loss(handle: DetectorHandle, image: np.ndarray, targets: Sequence[Detection]) -> float:
    return handle.loss(image, targets)


def loss_gradient(handle: DetectorHandle, image: np.ndarray, targets: Sequence[Detection]) -> np.ndarray:
    return handle.loss_gradient(image, targets)


def finite_difference_gradient(
    handle: DetectorHandle,
    image: np.ndarray,
    targets: Sequence[Detection],
    h: float,
    coordinates: Sequence[tuple[int, int, int]],
) -> np.ndarray:
    """Central differences of the detection loss at the given (row, col,
    channel) coordinates. Test oracle for :func:`loss_gradient`."""
    if h <= 0:
        raise ValueError("h must be positive")
    image = np.asarray(image, dtype=np.float64)
    out = np.empty(len(coordinates))
    for n, (i, j, c) in enumerate(coordinates):
        if not (0 <= i < image.shape[0] and 0 <= j < image.shape[1] and 0 <= c < 3):
            raise ValueError(f"coordinate {(i, j, c)} out of range")
        up = image.copy()
        dn = image.copy()
        up[i, j, c] += h
        dn[i, j, c] -= h
        out[n] = (handle.loss(up, targets) - handle.loss(dn, targets)) / (2.0 * h)
    return out
