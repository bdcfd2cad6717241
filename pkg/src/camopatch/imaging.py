"""Patch application and the transformation pipeline.

Images are (H, W, 3) float64 arrays with channels in [0, 255]. A patch is
placed from a detection box (centred, scaled by a side ratio), the covered
segment can be extracted for perceptual comparison, and a sampled
rotate/brighten/crop transformation can be applied to the composed image with
an exact gradient pullback onto the patch raster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class PatchPlacement:
    x: int  # top-left column
    y: int  # top-left row
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"degenerate placement {self}")

    def validate_within(self, image_height: int, image_width: int) -> None:
        if (
            self.x < 0
            or self.y < 0
            or self.x + self.width > image_width
            or self.y + self.height > image_height
        ):
            raise ValueError(
                f"placement {self} outside {image_height}x{image_width} image"
            )


@dataclass(frozen=True)
class Transformation:
    rotation: int  # degrees, counterclockwise, in {0, 90, 270}
    brightness: float
    occupancy: float  # target patch-area / image-area after crop

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise ValueError(f"rotation must be a multiple of 90, got {self.rotation}")


@dataclass(frozen=True)
class TransformConfig:
    rotations: tuple[int, ...] = (0, 90, 270)
    brightness_range: tuple[float, float] = (0.4, 1.6)
    occupancy_range: tuple[float, float] = (0.2, 0.3)
    enabled: bool = True

    @staticmethod
    def identity() -> "TransformConfig":
        return TransformConfig(rotations=(0,), brightness_range=(1.0, 1.0),
                               occupancy_range=(0.0, 0.0), enabled=False)


@dataclass
class TransformResult:
    """Transformed image plus everything the gradient pullback needs."""

    image: np.ndarray
    placement: PatchPlacement
    transformation: Transformation
    rotation_k: int
    pass_mask: np.ndarray  # over the patch region, zero where the clip saturated
    crop_offset: tuple[int, int]  # (row, col) of the crop window
    occupancy: float
    fallback: bool  # target occupancy unreachable without truncating the patch
    original_shape: tuple[int, int] = (0, 0)


def ensure_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("empty image")
    if not np.all(np.isfinite(image)):
        raise ValueError("non-finite image values")
    return image


def compute_placement(
    box: BoundingBox, ratio: float, image_height: int, image_width: int
) -> PatchPlacement:
    """Centre a ratio-scaled patch rectangle on the box, clamped into bounds."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    pw = int(round(ratio * box.width))
    ph = int(round(ratio * box.height))
    if pw <= 1 or ph <= 1:
        raise ValueError(f"patch degenerates to {ph}x{pw} for box {box}")
    cx, cy = box.center
    x = int(round(cx - pw / 2.0))
    y = int(round(cy - ph / 2.0))
    x = min(max(x, 0), image_width - pw)
    y = min(max(y, 0), image_height - ph)
    placement = PatchPlacement(x=x, y=y, height=ph, width=pw)
    placement.validate_within(image_height, image_width)
    return placement


def extract_segment(image: np.ndarray, placement: PatchPlacement) -> np.ndarray:
    image = ensure_image(image)
    placement.validate_within(image.shape[0], image.shape[1])
    return image[
        placement.y : placement.y + placement.height,
        placement.x : placement.x + placement.width,
    ].copy()


def apply_patch(
    image: np.ndarray, patch: np.ndarray, placement: PatchPlacement
) -> np.ndarray:
    image = ensure_image(image)
    placement.validate_within(image.shape[0], image.shape[1])
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (placement.height, placement.width, 3):
        raise ValueError(
            f"patch shape {patch.shape} does not match placement {placement}"
        )
    out = image.copy()
    out[
        placement.y : placement.y + placement.height,
        placement.x : placement.x + placement.width,
    ] = patch
    return out


def sample_transformation(
    rng: np.random.Generator, config: TransformConfig
) -> Transformation:
    if not config.enabled:
        return Transformation(rotation=0, brightness=1.0, occupancy=0.0)
    rotation = int(config.rotations[rng.integers(len(config.rotations))])
    brightness = float(rng.uniform(*config.brightness_range))
    occupancy = float(rng.uniform(*config.occupancy_range))
    return Transformation(rotation=rotation, brightness=brightness, occupancy=occupancy)


def _rotate_placement(
    placement: PatchPlacement, k: int, height: int, width: int
) -> PatchPlacement:
    x, y, h, w = placement.x, placement.y, placement.height, placement.width
    k = k % 4
    if k == 0:
        return placement
    if k == 1:  # 90 deg counterclockwise: (H, W) -> (W, H)
        return PatchPlacement(x=y, y=width - x - w, height=w, width=h)
    if k == 2:
        return PatchPlacement(x=width - x - w, y=height - y - h, height=h, width=w)
    return PatchPlacement(x=height - y - h, y=x, height=w, width=h)  # 270 deg


def _crop_window(
    image_height: int,
    image_width: int,
    placement: PatchPlacement,
    target_occupancy: float,
    band: tuple[float, float],
) -> tuple[int, int, int, int, float, bool]:
    """Pick a crop window containing the patch whose occupancy approaches the
    target. Returns (row, col, ch, cw, occupancy, fallback)."""
    ph, pw = placement.height, placement.width
    area = ph * pw
    target_area = area / target_occupancy
    scale = np.sqrt(target_area / (image_height * image_width))
    ch0 = int(round(scale * image_height))
    cw0 = int(round(scale * image_width))

    # the acceptable band always contains the requested target, so an identity
    # request (occupancy equal to the current one) is honored exactly
    lo = min(band[0], target_occupancy)
    hi = max(band[1], target_occupancy)
    best = None
    for dh in range(-3, 4):
        for dw in range(-3, 4):
            ch = min(max(ch0 + dh, ph), image_height)
            cw = min(max(cw0 + dw, pw), image_width)
            occ = area / (ch * cw)
            in_band = lo <= occ <= hi
            key = (not in_band, abs(occ - target_occupancy), ch, cw)
            if best is None or key < best[0]:
                best = (key, ch, cw, occ, in_band)
    _, ch, cw, occ, in_band = best

    pcy = placement.y + ph / 2.0
    pcx = placement.x + pw / 2.0
    row = int(round(pcy - ch / 2.0))
    row = min(max(row, max(0, placement.y + ph - ch)), min(image_height - ch, placement.y))
    col = int(round(pcx - cw / 2.0))
    col = min(max(col, max(0, placement.x + pw - cw)), min(image_width - cw, placement.x))
    return row, col, ch, cw, occ, not in_band


def apply_transformation(
    image: np.ndarray,
    t: Transformation,
    placement: PatchPlacement,
    occupancy_band: tuple[float, float] = (0.2, 0.3),
) -> TransformResult:
    """Rotate (exact 90-degree permutation), scale brightness with clipping,
    then crop edges toward the target patch occupancy, keeping the patch whole.
    """
    image = ensure_image(image)
    placement.validate_within(image.shape[0], image.shape[1])
    k = (t.rotation // 90) % 4
    rotated = np.rot90(image, k) if k else image
    placement_r = _rotate_placement(placement, k, image.shape[0], image.shape[1])

    pre = rotated * t.brightness
    bright = np.clip(pre, 0.0, 255.0)
    sat = (pre >= 0.0) & (pre <= 255.0)

    rh, rw = bright.shape[0], bright.shape[1]
    if t.occupancy > 0.0:
        row, col, ch, cw, occ, fallback = _crop_window(
            rh, rw, placement_r, t.occupancy, occupancy_band
        )
        cropped = bright[row : row + ch, col : col + cw]
        placement_c = replace(placement_r, x=placement_r.x - col, y=placement_r.y - row)
        sat = sat[row : row + ch, col : col + cw]
    else:
        cropped, placement_c = bright, placement_r
        row = col = 0
        occ = placement.height * placement.width / (rh * rw)
        fallback = False

    pass_mask = sat[
        placement_c.y : placement_c.y + placement_c.height,
        placement_c.x : placement_c.x + placement_c.width,
    ].astype(np.float64)
    return TransformResult(
        image=np.ascontiguousarray(cropped),
        placement=placement_c,
        transformation=t,
        rotation_k=k,
        pass_mask=pass_mask,
        crop_offset=(row, col),
        occupancy=occ,
        fallback=fallback,
        original_shape=(image.shape[0], image.shape[1]),
    )


def pullback_gradient(
    grad_on_transformed: np.ndarray, result: TransformResult
) -> np.ndarray:
    """Map a loss gradient on the transformed image back onto the patch raster.

    Restricts to the patch rectangle, applies the brightness chain rule with
    saturated pixels zeroed, and inverts the rotation permutation.
    """
    grad = np.asarray(grad_on_transformed, dtype=np.float64)
    if grad.shape != result.image.shape:
        raise ValueError(
            f"gradient shape {grad.shape} != transformed image shape {result.image.shape}"
        )
    p = result.placement
    region = grad[p.y : p.y + p.height, p.x : p.x + p.width]
    region = region * result.transformation.brightness * result.pass_mask
    if result.rotation_k:
        region = np.rot90(region, -result.rotation_k)
    return np.ascontiguousarray(region)


def transform_box(box: BoundingBox, result: TransformResult) -> BoundingBox | None:
    """Map a box from original coordinates into a transformed image's frame.

    Returns None when the box degenerates (cropped away)."""
    h, w = result.original_shape
    k = result.rotation_k
    x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
    if k == 1:
        x0, y0, x1, y1 = y0, w - box.x_max, y1, w - box.x_min
    elif k == 2:
        x0, y0, x1, y1 = w - box.x_max, h - box.y_max, w - box.x_min, h - box.y_min
    elif k == 3:
        x0, y0, x1, y1 = h - box.y_max, box.x_min, h - box.y_min, box.x_max
    row, col = result.crop_offset
    ch, cw = result.image.shape[0], result.image.shape[1]
    x0 = min(max(x0 - col, 0.0), float(cw))
    x1 = min(max(x1 - col, 0.0), float(cw))
    y0 = min(max(y0 - row, 0.0), float(ch))
    y1 = min(max(y1 - row, 0.0), float(ch))
    if x1 - x0 < 2.0 or y1 - y0 < 2.0:
        return None
    return BoundingBox(x0, y0, x1, y1)


def clip_rgb(raster: np.ndarray) -> np.ndarray:
    """Elementwise clamp to the printable [0, 255] range."""
    raster = np.asarray(raster, dtype=np.float64)
    if not np.all(np.isfinite(raster)):
        raise ValueError("non-finite values")
    return np.clip(raster, 0.0, 255.0)


def clamp_to_epsilon_ball(
    patch: np.ndarray, p_orig: np.ndarray, epsilon: float
) -> np.ndarray:
    """Optional disguise constraint: clamp each channel into
    [p_orig - eps, p_orig + eps], then into RGB range."""
    patch = np.asarray(patch, dtype=np.float64)
    p_orig = np.asarray(p_orig, dtype=np.float64)
    if patch.shape != p_orig.shape:
        raise ValueError(f"shape mismatch {patch.shape} vs {p_orig.shape}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return clip_rgb(np.clip(patch, p_orig - epsilon, p_orig + epsilon))


# ---- file interfaces: 8-bit PNG plus JSON sidecars -------------------------


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG, promoting channel values to float64."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write an image as 8-bit PNG, rounding channels to nearest."""
    image = ensure_image(image)
    if image.min() < 0.0 or image.max() > 255.0:
        raise ValueError("image must be clipped to [0, 255] before saving")
    quantized = np.rint(image).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


def save_boxes(path: str | Path, boxes: dict[str, BoundingBox]) -> None:
    payload = {name: box.as_list() for name, box in boxes.items()}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_boxes(path: str | Path) -> dict[str, BoundingBox]:
    payload = json.loads(Path(path).read_text())
    return {name: BoundingBox(*vals) for name, vals in payload.items()}


def save_truths(path: str | Path, truths: dict[str, list[tuple[BoundingBox, int]]]) -> None:
    payload = {
        name: [{"box": box.as_list(), "class_id": cid} for box, cid in entries]
        for name, entries in truths.items()
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_truths(path: str | Path) -> dict[str, list[tuple[BoundingBox, int]]]:
    payload = json.loads(Path(path).read_text())
    return {
        name: [(BoundingBox(*e["box"]), int(e["class_id"])) for e in entries]
        for name, entries in payload.items()
    }
