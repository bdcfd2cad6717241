"""Install diagnostic: load the checkpoint, run detect + gradient on a sample
image, verify shapes/finiteness and that the target class is seen."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from detector_worker.model import WorkerDetector, load_checkpoint


def self_test(checkpoint: str | Path, image_path: str | Path) -> int:
    failures = []
    try:
        model, meta = load_checkpoint(checkpoint)
    except Exception as exc:  # noqa: BLE001
        print(f"FAIL: cannot load checkpoint {checkpoint}: {exc}")
        return 1
    detector = WorkerDetector(model, meta)
    with Image.open(image_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.float32)
    print(f"model fasterrcnn-tiny-{meta['digest']}, image {image.shape}")

    detections = detector.detect(image, 0.5)
    asset = [d for d in detections if d["class_id"] == 0]
    if asset:
        top = asset[0]
        print(f"ok: {len(asset)} target-class detection(s), top confidence {top['confidence']:.3f}")
    else:
        failures.append("no target-class detection at threshold 0.5")

    targets = detections or [
        {"x_min": 16, "y_min": 16, "x_max": 48, "y_max": 48, "class_id": 0}
    ]
    grad = detector.loss_gradient(image, targets)
    if grad.shape != image.shape:
        failures.append(f"gradient shape {grad.shape} != image shape {image.shape}")
    bad = np.argwhere(~np.isfinite(grad))
    if len(bad):
        failures.append(f"gradient not finite at {tuple(bad[0])}")
    else:
        print(f"ok: gradient shape {grad.shape}, all finite, max |g| {np.abs(grad).max():.2e}")

    if failures:
        for f in failures:
            print(f"FAIL: {f}")
        return 1
    print("self-test passed")
    return 0
