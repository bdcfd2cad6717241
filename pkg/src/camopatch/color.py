"""Perceptual colour metrics.

sRGB<->CIELAB conversion (D65, 2 degree observer), the CIEDE2000 difference
with kL=kC=kH=1, and the image-level perceptual distance used to keep a patch
close to the segment it covers: the L2 norm over per-pixel CIEDE2000 values,
together with its gradient w.r.t. the patch's RGB channels.
"""

from __future__ import annotations

import numpy as np

from camopatch import _kernels


def srgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """Convert sRGB values in [0, 255] to CIELAB. Shape (..., 3) preserved.

    Rejects out-of-range input; the optimizer-side paths that tolerate
    transiently unclipped pixels call the kernel lane directly.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing channel axis of 3, got shape {rgb.shape}")
    if not np.all(np.isfinite(rgb)):
        raise ValueError("non-finite RGB input")
    if rgb.min() < 0.0 or rgb.max() > 255.0:
        raise ValueError("RGB channels must lie in [0, 255]")
    return _kernels.srgb_to_lab(rgb)


def lab_to_srgb(lab: np.ndarray) -> np.ndarray:
    """Inverse conversion; exact round-trip partner of :func:`srgb_to_lab`."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.shape[-1] != 3:
        raise ValueError(f"expected trailing channel axis of 3, got shape {lab.shape}")
    return _kernels.lab_to_srgb(lab)


def ciede2000(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIEDE2000 difference between Lab values, elementwise over pixels."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    return _kernels.ciede2000(lab1, lab2)


def _check_pair(patch: np.ndarray, segment: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    patch = np.asarray(patch, dtype=np.float64)
    segment = np.asarray(segment, dtype=np.float64)
    if patch.shape != segment.shape:
        raise ValueError(
            f"patch shape {patch.shape} != segment shape {segment.shape}"
        )
    if patch.shape[-1] != 3:
        raise ValueError(f"expected trailing channel axis of 3, got {patch.shape}")
    return patch, segment


def perc_distance(patch: np.ndarray, segment: np.ndarray) -> float:
    """L2 norm of per-pixel CIEDE2000 between two equal-shape RGB rasters."""
    patch, segment = _check_pair(patch, segment)
    de = _kernels.ciede2000(_kernels.srgb_to_lab(patch), _kernels.srgb_to_lab(segment))
    return float(np.sqrt(np.sum(de * de)))


def perc_gradient(patch: np.ndarray, segment: np.ndarray) -> np.ndarray:
    """Gradient of :func:`perc_distance` w.r.t. the patch's RGB channels.

    Differentiates the squared per-pixel terms, so D = sqrt(sum sq_i) gives
    dD/dp_i = d(sq_i)/dp_i / (2 D): finite at per-pixel coincidences, zero
    raster at the global minimum patch == segment.
    """
    patch, segment = _check_pair(patch, segment)
    sq, dsq_dlab = _kernels.ciede2000_sq_grad(
        _kernels.srgb_to_lab(patch), _kernels.srgb_to_lab(segment)
    )
    total = float(np.sum(sq))
    if total <= 0.0:
        return np.zeros_like(patch)
    jac = _kernels.srgb_to_lab_jacobian(patch)  # (..., lab_i, rgb_j)
    dsq_drgb = np.einsum("...i,...ij->...j", dsq_dlab, jac)
    return dsq_drgb / (2.0 * np.sqrt(total))
