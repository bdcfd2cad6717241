"""Faster R-CNN with a small custom backbone, sized for 64px corpus images.

No pretrained weights cross the wire: the model trains locally on a corpus
exported by the patch toolkit (PNG images + truths.json) and the checkpoint
digest is declared in the protocol handshake instead of a model-zoo identity.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from torch import nn
from torchvision.models.detection import FasterRCNN
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.ops import MultiScaleRoIAlign

# single foreground class: the corpus "target asset" (aircraft stand-in);
# torchvision label 1 <-> wire class_id 0
NUM_CLASSES = 2
IMAGE_SIZE = 64

LOSS_TERMS = ("loss_classifier", "loss_box_reg", "loss_objectness", "loss_rpn_box_reg")


class TinyBackbone(nn.Sequential):
    def __init__(self):
        super().__init__(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.out_channels = 64


def build_model() -> FasterRCNN:
    backbone = TinyBackbone()
    anchors = AnchorGenerator(
        sizes=((12, 20, 28, 36),), aspect_ratios=((0.6, 1.0, 1.6),)
    )
    roi_pool = MultiScaleRoIAlign(
        featmap_names=["0"], output_size=5, sampling_ratio=2
    )
    return FasterRCNN(
        backbone,
        num_classes=NUM_CLASSES,
        rpn_anchor_generator=anchors,
        box_roi_pool=roi_pool,
        min_size=IMAGE_SIZE,
        max_size=IMAGE_SIZE,
        image_mean=[0.5, 0.5, 0.5],
        image_std=[0.25, 0.25, 0.25],
        rpn_pre_nms_top_n_train=256,
        rpn_pre_nms_top_n_test=128,
        rpn_post_nms_top_n_train=128,
        rpn_post_nms_top_n_test=64,
        box_detections_per_img=16,
    )


def save_checkpoint(path: str | Path, model: FasterRCNN, meta: dict) -> None:
    torch.save({"state_dict": model.state_dict(), "meta": meta}, path)


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def load_checkpoint(path: str | Path) -> tuple[FasterRCNN, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = build_model()
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = dict(blob.get("meta", {}))
    meta["digest"] = checkpoint_digest(path)
    return model, meta


class WorkerDetector:
    """Inference + input-gradient wrapper around the checkpointed model.

    Images are (H, W, 3) float arrays in [0, 255]. Label sampling inside the
    RCNN losses is reseeded per call so loss and gradient are deterministic
    for identical requests.
    """

    def __init__(self, model: FasterRCNN, meta: dict):
        self.model = model
        self.meta = meta

    def _to_tensor(self, image, requires_grad=False) -> torch.Tensor:
        t = torch.as_tensor(image, dtype=torch.float32)
        if requires_grad:
            t.requires_grad_(True)
        return t

    def detect(self, image, confidence_threshold: float) -> list[dict]:
        self.model.eval()
        with torch.no_grad():
            x = (self._to_tensor(image) / 255.0).permute(2, 0, 1)
            out = self.model([x])[0]
        detections = []
        for box, label, score in zip(out["boxes"], out["labels"], out["scores"]):
            if float(score) < confidence_threshold:
                continue
            x0, y0, x1, y1 = (float(v) for v in box)
            if x1 - x0 < 1.0 or y1 - y0 < 1.0:
                continue
            detections.append(
                {
                    "x_min": x0,
                    "y_min": y0,
                    "x_max": x1,
                    "y_max": y1,
                    "class_id": int(label) - 1,
                    "confidence": float(score),
                }
            )
        detections.sort(key=lambda d: (-d["confidence"], d["x_min"], d["y_min"]))
        return detections

    def _targets_to_torch(self, targets, image_shape) -> dict:
        if targets:
            boxes = torch.tensor(
                [[t["x_min"], t["y_min"], t["x_max"], t["y_max"]] for t in targets],
                dtype=torch.float32,
            )
            labels = torch.tensor([int(t["class_id"]) + 1 for t in targets])
        else:
            boxes = torch.zeros((0, 4), dtype=torch.float32)
            labels = torch.zeros((0,), dtype=torch.int64)
        return {"boxes": boxes, "labels": labels}

    def _losses(self, image_tensor: torch.Tensor, targets) -> torch.Tensor:
        # train mode for the loss heads; sampling reseeded for determinism
        torch.manual_seed(0)
        self.model.train()
        x = (image_tensor / 255.0).permute(2, 0, 1)
        losses = self.model([x], [self._targets_to_torch(targets, image_tensor.shape)])
        self.model.eval()
        return sum(losses[k] for k in LOSS_TERMS if k in losses)

    def loss(self, image, targets) -> float:
        with torch.enable_grad():
            t = self._to_tensor(image)
            return float(self._losses(t, targets).detach())

    def loss_gradient(self, image, targets):
        t = self._to_tensor(image, requires_grad=True)
        total = self._losses(t, targets)
        total.backward()
        grad = t.grad
        if grad is None:
            grad = torch.zeros_like(t)
        return grad.numpy()
