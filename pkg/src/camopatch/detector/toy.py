"""Built-in differentiable detector.

A small three-conv network with objectness and box-offset heads on a coarse
grid (stride 8), written against the kernel lanes with hand-rolled
reverse-mode gradients, so detection loss gradients w.r.t. input pixels are
available without any ML framework. Trains on the synthetic corpus to the
shipped validation criterion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from camopatch import _kernels
from camopatch.detector.base import Detection, non_max_suppression
from camopatch.detector.corpus import Corpus, CorpusConfig, generate_corpus
from camopatch.imaging import BoundingBox

STRIDE = 8
LEAKY_ALPHA = 0.1
BOX_WEIGHT = 3.0
NMS_IOU = 0.5


class ToyTrainingError(RuntimeError):
    pass


@dataclass
class ToyDetectorParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    image_size: int
    anchor: float
    seed: int

    def weight_items(self):
        return [
            ("conv1_w", self.conv1_w),
            ("conv1_b", self.conv1_b),
            ("conv2_w", self.conv2_w),
            ("conv2_b", self.conv2_b),
            ("conv3_w", self.conv3_w),
            ("conv3_b", self.conv3_b),
            ("head_w", self.head_w),
            ("head_b", self.head_b),
        ]

    def save(self, path: str | Path) -> None:
        meta = {"image_size": self.image_size, "anchor": self.anchor, "seed": self.seed}
        np.savez(
            path,
            meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            **dict(self.weight_items()),
        )

    @staticmethod
    def load(path: str | Path) -> "ToyDetectorParams":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            return ToyDetectorParams(
                conv1_w=data["conv1_w"],
                conv1_b=data["conv1_b"],
                conv2_w=data["conv2_w"],
                conv2_b=data["conv2_b"],
                conv3_w=data["conv3_w"],
                conv3_b=data["conv3_b"],
                head_w=data["head_w"],
                head_b=data["head_b"],
                image_size=int(meta["image_size"]),
                anchor=float(meta["anchor"]),
                seed=int(meta["seed"]),
            )


def init_params(
    seed: int, image_size: int = 64, channels: tuple[int, int, int] = (16, 32, 48)
) -> ToyDetectorParams:
    if image_size % STRIDE != 0:
        raise ValueError("image_size must be divisible by 8")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = channels

    def he(shape, fan_in):
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    return ToyDetectorParams(
        conv1_w=he((c1, 3, 3, 3), 3 * 9),
        conv1_b=np.zeros(c1),
        conv2_w=he((c2, c1, 3, 3), c1 * 9),
        conv2_b=np.zeros(c2),
        conv3_w=he((c3, c2, 3, 3), c2 * 9),
        conv3_b=np.zeros(c3),
        head_w=he((5, c3, 3, 3), c3 * 9),
        head_b=np.zeros(5),
        image_size=image_size,
        anchor=24.0,
        seed=seed,
    )


def _leaky(x):
    return np.where(x > 0.0, x, LEAKY_ALPHA * x)


def _leaky_grad(dy, x):
    return dy * np.where(x > 0.0, 1.0, LEAKY_ALPHA)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _forward(params: ToyDetectorParams, batch: np.ndarray):
    """batch: (N, 3, H, W) in [0, 255]. Returns head output and the caches
    needed for the backward pass."""
    x0 = batch / 255.0
    z1 = _kernels.conv2d(x0, params.conv1_w, params.conv1_b, 1)
    a1 = _leaky(z1)
    p1, i1 = _kernels.maxpool2(a1)
    z2 = _kernels.conv2d(p1, params.conv2_w, params.conv2_b, 1)
    a2 = _leaky(z2)
    p2, i2 = _kernels.maxpool2(a2)
    z3 = _kernels.conv2d(p2, params.conv3_w, params.conv3_b, 1)
    a3 = _leaky(z3)
    p3, i3 = _kernels.maxpool2(a3)
    out = _kernels.conv2d(p3, params.head_w, params.head_b, 1)
    cache = (x0, z1, p1, i1, z2, p2, i2, z3, p3, i3)
    return out, cache


def _backward(
    params: ToyDetectorParams,
    dout: np.ndarray,
    cache,
    need_input_grad: bool,
    need_param_grads: bool,
):
    x0, z1, p1, i1, z2, p2, i2, z3, p3, i3 = cache
    grads = {}

    dp3 = _kernels.conv2d_input_grad(dout, params.head_w, 1, p3.shape[2], p3.shape[3])
    if need_param_grads:
        grads["head_w"], grads["head_b"] = _kernels.conv2d_weight_grad(dout, p3, 3, 1)

    da3 = _kernels.maxpool2_grad(dp3, i3, z3.shape[2], z3.shape[3])
    dz3 = _leaky_grad(da3, z3)
    dp2 = _kernels.conv2d_input_grad(dz3, params.conv3_w, 1, p2.shape[2], p2.shape[3])
    if need_param_grads:
        grads["conv3_w"], grads["conv3_b"] = _kernels.conv2d_weight_grad(dz3, p2, 3, 1)

    da2 = _kernels.maxpool2_grad(dp2, i2, z2.shape[2], z2.shape[3])
    dz2 = _leaky_grad(da2, z2)
    dp1 = _kernels.conv2d_input_grad(dz2, params.conv2_w, 1, p1.shape[2], p1.shape[3])
    if need_param_grads:
        grads["conv2_w"], grads["conv2_b"] = _kernels.conv2d_weight_grad(dz2, p1, 3, 1)

    da1 = _kernels.maxpool2_grad(dp1, i1, z1.shape[2], z1.shape[3])
    dz1 = _leaky_grad(da1, z1)
    if need_param_grads:
        grads["conv1_w"], grads["conv1_b"] = _kernels.conv2d_weight_grad(dz1, x0, 3, 1)

    dx = None
    if need_input_grad:
        dx = _kernels.conv2d_input_grad(dz1, params.conv1_w, 1, x0.shape[2], x0.shape[3])
        dx = dx / 255.0
    return dx, grads


def _encode_targets(
    targets: Sequence[Detection],
    grid_shape: tuple[int, int],
    image_shape: tuple[int, int],
    anchor: float,
) -> tuple[np.ndarray, list[tuple[int, int, np.ndarray]]]:
    """Positive-count grid plus one (row, col, offsets) entry per target
    instance; offsets are (frac_x, frac_y, log w/anchor, log h/anchor)."""
    gh, gw = grid_shape
    ih, iw = image_shape
    counts = np.zeros((gh, gw))
    instances = []
    for det in targets:
        box = det.box
        cx, cy = box.center
        if not (0 <= cx <= iw and 0 <= cy <= ih):
            raise ValueError(f"target box {box} outside {ih}x{iw} image")
        col = min(max(int(cx // STRIDE), 0), gw - 1)
        row = min(max(int(cy // STRIDE), 0), gh - 1)
        counts[row, col] += 1.0
        frac_x = np.clip(cx / STRIDE - col, 1e-4, 1 - 1e-4)
        frac_y = np.clip(cy / STRIDE - row, 1e-4, 1 - 1e-4)
        tw = np.log(max(box.width, 2.0) / anchor)
        th = np.log(max(box.height, 2.0) / anchor)
        instances.append((row, col, np.array([frac_x, frac_y, tw, th])))
    return counts, instances


def _smooth_l1(d):
    return np.where(np.abs(d) < 1.0, 0.5 * d * d, np.abs(d) - 0.5)


def _smooth_l1_grad(d):
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def _loss_and_head_grad(out_img: np.ndarray, counts, instances, pos_weight: float = 1.0):
    """Loss for one image's (5, G, G) head output; also d loss / d out.

    ``pos_weight`` rebalances the 1-positive-to-63-background cell ratio while
    training; the reported detection loss always uses the unweighted form.
    """
    z = out_img[0]
    sig = _sigmoid(z)
    positive = counts > 0.0
    loss_obj = float(
        np.sum(np.where(positive, pos_weight * counts * _softplus(-z), _softplus(z)))
    )
    dz = np.where(positive, pos_weight * counts * (sig - 1.0), sig)

    dout = np.zeros_like(out_img)
    dout[0] = dz
    loss_box = 0.0
    for row, col, tgt in instances:
        raw = out_img[1:5, row, col]
        sxy = _sigmoid(raw[:2])
        d = np.concatenate([sxy - tgt[:2], raw[2:] - tgt[2:]])
        loss_box += float(np.sum(_smooth_l1(d)))
        g = _smooth_l1_grad(d)
        g[:2] *= sxy * (1.0 - sxy)
        dout[1:5, row, col] += BOX_WEIGHT * g
    return loss_obj + BOX_WEIGHT * loss_box, dout


class ToyDetector:
    """Handle over trained (or freshly initialized) toy parameters.

    Fully convolutional: accepts any (H, W, 3) image with H, W >= 16 by
    zero-padding bottom/right to the next grid-stride multiple internally, so
    transformed (cropped) images work without resizing.
    """

    kind = "toy"

    def __init__(self, params: ToyDetectorParams):
        self.params = params

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
        if image.shape[0] < 2 * STRIDE or image.shape[1] < 2 * STRIDE:
            raise ValueError(f"image {image.shape} smaller than {2 * STRIDE}px minimum")
        return image

    def _head(self, image: np.ndarray):
        image = self._check_image(image)
        h, w = image.shape[0], image.shape[1]
        ph = (-h) % STRIDE
        pw = (-w) % STRIDE
        if ph or pw:
            image = np.pad(image, ((0, ph), (0, pw), (0, 0)))
        batch = image.transpose(2, 0, 1)[None]
        out, cache = _forward(self.params, batch)
        return out[0], cache, (h, w)

    def detect(self, image: np.ndarray, confidence_threshold: float) -> list[Detection]:
        if not 0.0 <= confidence_threshold <= 1.0:
            raise ValueError("confidence threshold outside [0, 1]")
        out, _, (h, w) = self._head(image)
        conf = _sigmoid(out[0])
        rows, cols = np.nonzero(conf >= confidence_threshold)
        candidates = []
        for r, c in zip(rows, cols):
            tx, ty, tw, th = out[1:5, r, c]
            cx = (c + float(_sigmoid(np.array([tx]))[0])) * STRIDE
            cy = (r + float(_sigmoid(np.array([ty]))[0])) * STRIDE
            bw = self.params.anchor * float(np.exp(np.clip(tw, -4.0, 4.0)))
            bh = self.params.anchor * float(np.exp(np.clip(th, -4.0, 4.0)))
            x_min = max(cx - bw / 2.0, 0.0)
            y_min = max(cy - bh / 2.0, 0.0)
            x_max = min(cx + bw / 2.0, float(w))
            y_max = min(cy + bh / 2.0, float(h))
            if x_max - x_min < 1.0 or y_max - y_min < 1.0:
                continue
            candidates.append(
                Detection(
                    box=BoundingBox(x_min, y_min, x_max, y_max),
                    class_id=0,
                    confidence=float(conf[r, c]),
                )
            )
        return non_max_suppression(candidates, NMS_IOU)

    def loss(self, image: np.ndarray, targets: Sequence[Detection]) -> float:
        out, _, (h, w) = self._head(image)
        counts, instances = _encode_targets(
            targets, out.shape[1:], (h, w), self.params.anchor
        )
        value, _ = _loss_and_head_grad(out, counts, instances)
        return value

    def loss_gradient(self, image: np.ndarray, targets: Sequence[Detection]) -> np.ndarray:
        image = self._check_image(image)
        h, w = image.shape[0], image.shape[1]
        ph = (-h) % STRIDE
        pw = (-w) % STRIDE
        padded = np.pad(image, ((0, ph), (0, pw), (0, 0))) if ph or pw else image
        batch = padded.transpose(2, 0, 1)[None]
        out, cache = _forward(self.params, batch)
        counts, instances = _encode_targets(
            targets, out.shape[2:], (h, w), self.params.anchor
        )
        _, dout = _loss_and_head_grad(out[0], counts, instances)
        dx, _ = _backward(self.params, dout[None], cache, True, False)
        grad = np.ascontiguousarray(dx[0].transpose(1, 2, 0))
        return grad[:h, :w]

    def self_targets(self, image: np.ndarray, confidence_threshold: float = 0.5) -> list[Detection]:
        """The detector's own confident clean-image predictions, used as the
        suppression targets during patch training."""
        return self.detect(image, confidence_threshold)


@dataclass(frozen=True)
class ToyTrainConfig:
    batch_size: int = 8
    learning_rate: float = 2.5e-3
    lr_epoch_decay: float = 0.90
    pos_weight: float = 8.0
    max_epochs: int = 30
    val_target: float = 0.92
    val_floor: float = 0.90
    thresholds: tuple[float, ...] = (0.5, 0.1, 0.001)


@dataclass
class ToyTrainRecord:
    epoch_losses: list[float] = field(default_factory=list)
    val_map_history: list[tuple[int, float]] = field(default_factory=list)
    final_val_map: float = 0.0
    epochs_run: int = 0


def _truths_to_targets(entries) -> list[Detection]:
    return [Detection(box=box, class_id=cid, confidence=1.0) for box, cid in entries]


def train_toy_detector(
    corpus_config: CorpusConfig,
    seed: int,
    train_config: ToyTrainConfig = ToyTrainConfig(),
    corpus: Corpus | None = None,
) -> tuple[ToyDetectorParams, ToyTrainRecord]:
    """Train the toy network on the synthetic corpus until the validation
    criterion holds; deterministic given the seed. Raises ToyTrainingError if
    the iteration budget runs out below the floor."""
    from camopatch.evaluation import map50_multi_threshold

    if corpus is None:
        corpus = generate_corpus(corpus_config)
    if corpus_config.objects_per_image < 1 or not any(corpus.train_truths):
        raise ToyTrainingError("corpus contains no objects; nothing to train on")

    params = init_params(seed, corpus_config.image_size)
    record = ToyTrainRecord()
    rng = np.random.default_rng(seed + 1)

    adam_m = {k: np.zeros_like(v) for k, v in params.weight_items()}
    adam_v = {k: np.zeros_like(v) for k, v in params.weight_items()}
    t = 0
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    best_val = -1.0
    best_weights = None

    n = len(corpus.train_images)
    stacked = np.stack([img.transpose(2, 0, 1) for img in corpus.train_images])
    size = corpus_config.image_size
    grid = (size // STRIDE, size // STRIDE)
    encoded = [
        _encode_targets(_truths_to_targets(e), grid, (size, size), params.anchor)
        for e in corpus.train_truths
    ]

    for epoch in range(train_config.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_config.batch_size):
            batch_idx = order[start : start + train_config.batch_size]
            batch = stacked[batch_idx]
            out, cache = _forward(params, batch)
            douts = np.zeros_like(out)
            batch_loss = 0.0
            for bi, idx in enumerate(batch_idx):
                counts, instances = encoded[idx]
                _, dout = _loss_and_head_grad(
                    out[bi], counts, instances, train_config.pos_weight
                )
                # the logged curve is the unweighted detection loss
                value, _ = _loss_and_head_grad(out[bi], counts, instances)
                batch_loss += value
                douts[bi] = dout
            scale = 1.0 / len(batch_idx)
            epoch_loss += batch_loss
            _, grads = _backward(params, douts * scale, cache, False, True)

            t += 1
            lr_t = (
                train_config.learning_rate
                * train_config.lr_epoch_decay**epoch
                * np.sqrt(1.0 - beta2**t)
                / (1.0 - beta1**t)
            )
            for key, w in params.weight_items():
                g = grads[key]
                adam_m[key] = beta1 * adam_m[key] + (1 - beta1) * g
                adam_v[key] = beta2 * adam_v[key] + (1 - beta2) * g * g
                w -= lr_t * adam_m[key] / (np.sqrt(adam_v[key]) + eps)

        record.epoch_losses.append(epoch_loss / n)
        record.epochs_run = epoch + 1

        handle = ToyDetector(params)
        report = map50_multi_threshold(
            handle,
            corpus.val_images,
            corpus.val_truths,
            target_class=0,
            thresholds=train_config.thresholds,
        )
        val_map = report.map50_percent / 100.0
        record.val_map_history.append((epoch + 1, val_map))
        if val_map > best_val:
            best_val = val_map
            best_weights = {k: v.copy() for k, v in params.weight_items()}
        record.final_val_map = best_val
        if val_map >= train_config.val_target:
            return params, record

    # target missed inside the budget: keep the best epoch's weights
    if best_weights is not None:
        for key, w in params.weight_items():
            w[...] = best_weights[key]
    if best_val < train_config.val_floor:
        raise ToyTrainingError(
            f"validation mAP-50 {best_val:.3f} below floor "
            f"{train_config.val_floor} after {record.epochs_run} epochs"
        )
    return params, record
