"""Synthetic detection corpus: one "target asset" class of high-contrast
convex shapes (ellipses, rectangles, triangles) over textured value-noise
backgrounds. Fully deterministic given the seed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camopatch.imaging import BoundingBox


@dataclass(frozen=True)
class CorpusConfig:
    image_size: int = 64
    n_train: int = 320
    n_val: int = 64
    objects_per_image: int = 1
    size_range: tuple[int, int] = (16, 34)
    background_fraction: float = 0.0  # optional object-free training images
    seed: int = 0


@dataclass
class Corpus:
    train_images: list[np.ndarray]
    train_truths: list[list[tuple[BoundingBox, int]]]
    val_images: list[np.ndarray]
    val_truths: list[list[tuple[BoundingBox, int]]]
    config: CorpusConfig


def _value_noise_background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Muted textured background: bilinear-upsampled low-res colour grid plus
    fine pixel noise."""
    coarse = rng.uniform(50.0, 170.0, size=(9, 9, 3))
    grid = np.linspace(0, 8, size)
    i0 = np.floor(grid).astype(int).clip(0, 7)
    f_y = (grid - i0)[:, None, None]
    f_x = (grid - i0)[None, :, None]
    c00 = coarse[i0][:, i0]
    c01 = coarse[i0][:, np.clip(i0 + 1, 0, 8)]
    c10 = coarse[np.clip(i0 + 1, 0, 8)][:, i0]
    c11 = coarse[np.clip(i0 + 1, 0, 8)][:, np.clip(i0 + 1, 0, 8)]
    smooth = (
        c00 * (1 - f_y) * (1 - f_x)
        + c01 * (1 - f_y) * f_x
        + c10 * f_y * (1 - f_x)
        + c11 * f_y * f_x
    )
    noisy = smooth + rng.normal(0.0, 8.0, size=smooth.shape)
    return np.clip(noisy, 0.0, 255.0)


def _bright_color(rng: np.random.Generator) -> np.ndarray:
    """Saturated high-contrast colour: one dominant channel near full scale."""
    order = rng.permutation(3)
    c = np.empty(3)
    c[order[0]] = rng.uniform(215.0, 255.0)
    c[order[1]] = rng.uniform(0.0, 90.0)
    c[order[2]] = rng.uniform(0.0, 150.0)
    return c


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    kind = rng.integers(3)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 0:  # ellipse
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0
    if kind == 1:  # rectangle
        return np.ones((h, w), dtype=bool)
    # upward triangle
    frac = yy / max(h - 1, 1)
    half_width = (w / 2.0) * frac
    cx = (w - 1) / 2.0
    return np.abs(xx - cx) <= half_width


def _paint_object(
    rng: np.random.Generator, image: np.ndarray, size_range: tuple[int, int]
) -> BoundingBox:
    size = image.shape[0]
    w = int(rng.integers(size_range[0], size_range[1] + 1))
    h = int(rng.integers(size_range[0], size_range[1] + 1))
    x = int(rng.integers(2, size - w - 1))
    y = int(rng.integers(2, size - h - 1))
    mask = _shape_mask(rng, h, w)
    color = _bright_color(rng)
    region = image[y : y + h, x : x + w]
    region[mask] = color + rng.normal(0.0, 4.0, size=(int(mask.sum()), 3))
    image[y : y + h, x : x + w] = np.clip(region, 0.0, 255.0)
    return BoundingBox(x, y, x + w, y + h)


def _generate_split(
    rng: np.random.Generator, n: int, config: CorpusConfig, background_every: int
) -> tuple[list[np.ndarray], list[list[tuple[BoundingBox, int]]]]:
    images, truths = [], []
    for i in range(n):
        img = _value_noise_background(rng, config.image_size)
        entries = []
        if background_every == 0 or (i + 1) % background_every != 0:
            for _ in range(config.objects_per_image):
                box = _paint_object(rng, img, config.size_range)
                entries.append((box, 0))
        images.append(img)
        truths.append(entries)
    return images, truths


def generate_corpus(config: CorpusConfig) -> Corpus:
    if config.image_size % 8 != 0:
        raise ValueError("image_size must be divisible by the grid stride 8")
    hi = config.size_range[1]
    if hi + 4 > config.image_size:
        raise ValueError("object size range does not fit the image")
    rng = np.random.default_rng(config.seed)
    # interleave object-free training images for background calibration; the
    # validation split keeps one object per image
    bg_every = (
        int(round(1.0 / config.background_fraction))
        if config.background_fraction > 0 and config.objects_per_image > 0
        else 0
    )
    train_images, train_truths = _generate_split(rng, config.n_train, config, bg_every)
    val_images, val_truths = _generate_split(rng, config.n_val, config, 0)
    return Corpus(train_images, train_truths, val_images, val_truths, config)
