"""Train the worker's Faster R-CNN on an exported corpus directory
(PNG images + truths.json, the toolkit's file interchange format)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from detector_worker.model import build_model, save_checkpoint


def load_corpus_dir(data_dir: str | Path) -> list[tuple[np.ndarray, list[dict]]]:
    data_dir = Path(data_dir)
    truths = json.loads((data_dir / "truths.json").read_text())
    out = []
    for name, entries in sorted(truths.items()):
        with Image.open(data_dir / name) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32)
        out.append((image, entries))
    return out


def _to_sample(image: np.ndarray, entries: list[dict]):
    x = torch.as_tensor(image / 255.0, dtype=torch.float32).permute(2, 0, 1)
    if entries:
        boxes = torch.tensor([e["box"] for e in entries], dtype=torch.float32)
        labels = torch.tensor([int(e["class_id"]) + 1 for e in entries])
    else:
        boxes = torch.zeros((0, 4), dtype=torch.float32)
        labels = torch.zeros((0,), dtype=torch.int64)
    return x, {"boxes": boxes, "labels": labels}


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def evaluate_recall(model, val_samples, threshold=0.5, iou_floor=0.5) -> float:
    """Fraction of images whose top detection hits a truth box at IoU >= 0.5."""
    model.eval()
    hits = total = 0
    with torch.no_grad():
        for image, entries in val_samples:
            if not entries:
                continue
            total += 1
            x, _ = _to_sample(image, entries)
            out = model([x])[0]
            for box, score in zip(out["boxes"], out["scores"]):
                if float(score) < threshold:
                    continue
                if any(_iou([float(v) for v in box], e["box"]) >= iou_floor for e in entries):
                    hits += 1
                break
    return hits / max(total, 1)


def train_worker_model(
    train_dir: str | Path,
    val_dir: str | Path,
    out_path: str | Path,
    seed: int = 0,
    epochs: int = 12,
    batch_size: int = 4,
    learning_rate: float = 1e-3,
    recall_target: float = 0.85,
) -> dict:
    torch.manual_seed(seed)
    train_samples = load_corpus_dir(train_dir)
    val_samples = load_corpus_dir(val_dir)
    if not any(entries for _, entries in train_samples):
        raise ValueError("training corpus has no objects")

    model = build_model()
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)
    gen = torch.Generator().manual_seed(seed)

    history = []
    recall = 0.0
    for epoch in range(epochs):
        order = torch.randperm(len(train_samples), generator=gen).tolist()
        epoch_loss = 0.0
        model.train()
        for start in range(0, len(order), batch_size):
            batch = [train_samples[i] for i in order[start : start + batch_size]]
            images, targets = zip(*(_to_sample(img, e) for img, e in batch))
            losses = model(list(images), list(targets))
            total = sum(losses.values())
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            epoch_loss += float(total.detach())
        recall = evaluate_recall(model, val_samples)
        history.append({"epoch": epoch + 1, "loss": epoch_loss, "val_recall": recall})
        if recall >= recall_target and epoch >= 2:
            break

    meta = {
        "arch": "fasterrcnn-tiny",
        "seed": seed,
        "epochs_run": len(history),
        "val_recall": recall,
        "history": history,
    }
    save_checkpoint(out_path, model, meta)
    return meta
