"""Alternating patch training.

Each iteration applies the patch, and on iterations where ``i mod n == 0``
takes a sign-gradient ascent step on the detection loss through a freshly
sampled rotate/brighten/crop transformation (with momentum); every iteration
then takes a momentum gradient-descent step on the perceptual colour distance
between the patch and the segment it covers, and the patch is clipped back
into RGB space once at iteration end.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from camopatch import color
from camopatch.detector.base import Detection, DetectorHandle
from camopatch.imaging import (
    BoundingBox,
    PatchPlacement,
    TransformConfig,
    apply_patch,
    apply_transformation,
    clip_rgb,
    compute_placement,
    extract_segment,
    pullback_gradient,
    sample_transformation,
    save_image,
    transform_box,
)

INIT_MODES = ("random", "black", "image_segment", "hybrid")


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 10
    iterations_per_step: int = 200  # deception updates per step; total
    # iterations per step scale by n so the deception count stays fixed
    n: int = 1
    dlr0: float = 0.1
    dlr_decay: float = 0.95
    dlr_decay_frequency: int = 5
    deception_momentum: float = 0.9
    plr_max0: float = 0.5  # 0 disables perceptibility updates entirely
    plr_floor_fraction: float = 0.1
    plr_momentum: float = 0.9
    plr_max_decay: float = 0.95
    plr_max_decay_frequency: int = 5
    plr_max_decay_enabled: bool = True
    patch_ratio: float = 0.4
    init_mode: str = "hybrid"
    hybrid_noise: float = 25.5  # 10% of channel range
    target_confidence: float = 0.5
    transform: TransformConfig = field(default_factory=TransformConfig)
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.steps < 0:
            problems.append(f"steps must be >= 0, got {self.steps}")
        if self.iterations_per_step < 1:
            problems.append(f"iterations_per_step must be >= 1, got {self.iterations_per_step}")
        if self.n < 1:
            problems.append(f"n must be >= 1, got {self.n}")
        if self.dlr0 <= 0:
            problems.append(f"dlr0 must be positive, got {self.dlr0}")
        if self.plr_max0 < 0:
            problems.append(f"plr_max0 must be non-negative, got {self.plr_max0}")
        for name in ("deception_momentum", "plr_momentum"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                problems.append(f"{name} must lie in [0, 1), got {v}")
        for name in ("dlr_decay", "plr_max_decay"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                problems.append(f"{name} must lie in (0, 1], got {v}")
        for name in ("dlr_decay_frequency", "plr_max_decay_frequency"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.patch_ratio <= 1:
            problems.append(f"patch_ratio must lie in (0, 1], got {self.patch_ratio}")
        if self.init_mode not in INIT_MODES:
            problems.append(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if not 0 < self.plr_floor_fraction <= 1:
            problems.append(f"plr_floor_fraction must lie in (0, 1], got {self.plr_floor_fraction}")
        if problems:
            raise ValueError("; ".join(problems))

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PatchState:
    patch: np.ndarray
    placement: PatchPlacement
    deception_velocity: np.ndarray
    perceptibility_velocity: np.ndarray
    iteration: int = 0
    step: int = 0


@dataclass
class StepRow:
    step: int
    map50: float
    perc_distance: float
    dlr: float
    plr_max: float
    seconds: float


@dataclass
class TrainResult:
    patch: np.ndarray
    placements: list[PatchPlacement]
    record: list[StepRow]
    final_perc_distance: float
    targets: list[list[Detection]]
    config: TrainerConfig
    aborted: str = ""


def init_patch(
    mode: str, segment: np.ndarray, rng: np.random.Generator, hybrid_noise: float = 25.5
) -> np.ndarray:
    """Starting patch: black, a copy of the covered segment, uniform random, or
    the segment plus bounded RGB noise (hybrid)."""
    segment = np.asarray(segment, dtype=np.float64)
    if mode == "black":
        return np.zeros_like(segment)
    if mode == "image_segment":
        return segment.copy()
    if mode == "random":
        return rng.uniform(0.0, 255.0, size=segment.shape)
    if mode == "hybrid":
        noise = rng.uniform(-hybrid_noise, hybrid_noise, size=segment.shape)
        return clip_rgb(segment + noise)
    raise ValueError(f"unknown init mode {mode!r}")


def should_decept(iteration: int, n: int) -> bool:
    if n < 1:
        raise ValueError("n must be >= 1")
    return iteration % n == 0


def dlr_schedule(step: int, config: TrainerConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.dlr0 * config.dlr_decay ** (step // config.dlr_decay_frequency)


def plr_max_schedule(step: int, config: TrainerConfig) -> float:
    if not config.plr_max_decay_enabled:
        return config.plr_max0
    return config.plr_max0 * config.plr_max_decay ** (
        step // config.plr_max_decay_frequency
    )


def plr_schedule(iteration_within_step: int, step: int, config: TrainerConfig) -> float:
    """Cosine annealing from the step's current maximum down to
    floor_fraction * maximum across the step's iterations, restarting each
    step."""
    total = config.iterations_per_step * config.n
    if not 0 <= iteration_within_step < total:
        raise ValueError(f"iteration {iteration_within_step} outside step of {total}")
    cmax = plr_max_schedule(step, config)
    if total == 1:
        return cmax
    cosine = 0.5 * (1.0 + np.cos(np.pi * iteration_within_step / (total - 1)))
    frac = config.plr_floor_fraction + (1.0 - config.plr_floor_fraction) * cosine
    return cmax * frac


def deception_update(
    state: PatchState,
    image: np.ndarray,
    targets: Sequence[Detection],
    handle: DetectorHandle,
    t,
    dlr: float,
    momentum: float,
    occupancy_band: tuple[float, float],
) -> PatchState:
    """Sign-gradient ascent on the detection loss through one transformation
    draw; velocity accumulates the signed gradient. No clipping here."""
    composed = apply_patch(image, state.patch, state.placement)
    result = apply_transformation(composed, t, state.placement, occupancy_band)
    transformed_targets = []
    for det in targets:
        box = transform_box(det.box, result)
        if box is not None:
            transformed_targets.append(replace(det, box=box))
    grad_image = handle.loss_gradient(result.image, transformed_targets)
    grad_patch = pullback_gradient(grad_image, result)
    state.deception_velocity = (
        momentum * state.deception_velocity + np.sign(grad_patch)
    )
    state.patch = state.patch + dlr * state.deception_velocity
    return state


def perceptibility_update(
    state: PatchState, segment: np.ndarray, plr: float, momentum: float
) -> PatchState:
    """Momentum gradient descent on the perceptual distance to the covered
    segment (raw gradient, not sign). No clipping here."""
    grad = color.perc_gradient(state.patch, segment)
    state.perceptibility_velocity = momentum * state.perceptibility_velocity + grad
    state.patch = state.patch - plr * state.perceptibility_velocity
    return state


def _self_targets(
    handle: DetectorHandle, image: np.ndarray, box: BoundingBox, confidence: float
) -> list[Detection]:
    dets = handle.detect(image, confidence)
    if dets:
        return dets
    return [Detection(box=box, class_id=0, confidence=1.0)]


def train_patch(
    images_with_boxes: Sequence[tuple[np.ndarray, BoundingBox]],
    handle: DetectorHandle,
    config: TrainerConfig,
    checkpoint_dir: str | Path | None = None,
    truths: Sequence[Sequence[tuple[BoundingBox, int]]] | None = None,
    iteration_callback: Callable[[PatchState], None] | None = None,
) -> TrainResult:
    """Run the full alternating loop over the image set.

    The patch shape comes from the first image's box; per-iteration images are
    visited round-robin. Per-step mAP is logged against ``truths`` when given,
    else against the suppression targets' boxes. Deterministic given the seed.
    """
    from camopatch.evaluation import map50_multi_threshold

    if not images_with_boxes:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(config.seed)
    first_image, first_box = images_with_boxes[0]
    h0, w0 = first_image.shape[0], first_image.shape[1]
    base = compute_placement(first_box, config.patch_ratio, h0, w0)

    placements, segments, targets = [], [], []
    for image, box in images_with_boxes:
        h, w = image.shape[0], image.shape[1]
        cx, cy = box.center
        x = int(round(cx - base.width / 2.0))
        y = int(round(cy - base.height / 2.0))
        p = PatchPlacement(
            x=min(max(x, 0), w - base.width),
            y=min(max(y, 0), h - base.height),
            height=base.height,
            width=base.width,
        )
        placements.append(p)
        segments.append(extract_segment(image, p))
        targets.append(_self_targets(handle, image, box, config.target_confidence))

    state = PatchState(
        patch=init_patch(config.init_mode, segments[0], rng, config.hybrid_noise),
        placement=placements[0],
        deception_velocity=np.zeros_like(segments[0]),
        perceptibility_velocity=np.zeros_like(segments[0]),
    )

    eval_truths = truths
    if eval_truths is None:
        eval_truths = [[(d.box, d.class_id) for d in tgt] for tgt in targets]

    record: list[StepRow] = []
    aborted = ""
    iterations_per_step = config.iterations_per_step * config.n
    band = config.transform.occupancy_range

    for step in range(config.steps):
        t_start = time.perf_counter()
        dlr = dlr_schedule(step, config)
        try:
            for j in range(iterations_per_step):
                idx = state.iteration % len(images_with_boxes)
                image, _ = images_with_boxes[idx]
                state.placement = placements[idx]
                if should_decept(state.iteration, config.n):
                    t = sample_transformation(rng, config.transform)
                    deception_update(
                        state, image, targets[idx], handle, t, dlr,
                        config.deception_momentum, band,
                    )
                if config.plr_max0 > 0.0:
                    plr = plr_schedule(j, step, config)
                    perceptibility_update(
                        state, segments[idx], plr, config.plr_momentum
                    )
                state.patch = clip_rgb(state.patch)
                state.iteration += 1
                if iteration_callback is not None:
                    iteration_callback(state)
        except ConnectionError as exc:
            aborted = f"detector failure at step {step}: {exc}"
            break

        state.step = step + 1
        patched = [
            apply_patch(img, state.patch, p)
            for (img, _), p in zip(images_with_boxes, placements)
        ]
        report = map50_multi_threshold(handle, patched, eval_truths)
        perc = float(
            np.mean([color.perc_distance(state.patch, s) for s in segments])
        )
        row = StepRow(
            step=step + 1,
            map50=report.map50_percent,
            perc_distance=perc,
            dlr=dlr,
            plr_max=plr_max_schedule(step, config),
            seconds=time.perf_counter() - t_start,
        )
        record.append(row)
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, state, row, config, rng)

    final_perc = float(np.mean([color.perc_distance(state.patch, s) for s in segments]))
    return TrainResult(
        patch=state.patch,
        placements=placements,
        record=record,
        final_perc_distance=final_perc,
        targets=targets,
        config=config,
        aborted=aborted,
    )


def apply_final_patch(image: np.ndarray, result: TrainResult, index: int = 0) -> np.ndarray:
    return apply_patch(image, result.patch, result.placements[index])


# ---- checkpoint artifacts: PNG view + float sidecar + run record CSV -------


def sidecar_payload(
    patch: np.ndarray,
    placement: PatchPlacement,
    step: int,
    config: TrainerConfig,
    rng: np.random.Generator | None = None,
) -> dict:
    pixels = patch.ravel().tolist()
    digest_src = json.dumps(
        {"pixels": pixels, "shape": list(patch.shape), "step": step},
        sort_keys=True,
    )
    payload = {
        "shape": list(patch.shape),
        "pixels": pixels,
        "placement": {
            "x": placement.x,
            "y": placement.y,
            "height": placement.height,
            "width": placement.width,
        },
        "step": step,
        "config_hash": config.config_hash(),
        "content_digest": hashlib.sha256(digest_src.encode()).hexdigest(),
    }
    if rng is not None:
        payload["rng_state"] = json.loads(json.dumps(rng.bit_generator.state))
    return payload


def load_sidecar(path: str | Path) -> tuple[np.ndarray, PatchPlacement, dict]:
    payload = json.loads(Path(path).read_text())
    patch = np.array(payload["pixels"], dtype=np.float64).reshape(payload["shape"])
    pl = payload["placement"]
    placement = PatchPlacement(
        x=pl["x"], y=pl["y"], height=pl["height"], width=pl["width"]
    )
    return patch, placement, payload


def save_checkpoint(
    out_dir: str | Path,
    state: PatchState,
    row: StepRow,
    config: TrainerConfig,
    rng: np.random.Generator,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / f"patch_step{row.step:04d}.png", clip_rgb(state.patch))
    payload = sidecar_payload(state.patch, state.placement, row.step, config, rng)
    (out / f"patch_step{row.step:04d}.json").write_text(
        json.dumps(payload, sort_keys=True)
    )
    csv_path = out / "run_record.csv"
    new = not csv_path.exists()
    with csv_path.open("a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["step", "map50", "perc_distance", "dlr", "plr_max", "seconds"])
        writer.writerow(
            [row.step, row.map50, row.perc_distance, row.dlr, row.plr_max, row.seconds]
        )
