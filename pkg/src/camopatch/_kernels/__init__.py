"""Kernel backend selection.

Two lanes with identical signatures: ``numba_impl`` (JIT loops) and
``numpy_impl`` (vectorized fallback). ``CAMOPATCH_BACKEND`` picks the lane:

* ``auto`` (default): per kernel family, whichever lane measures faster here:
  numba for the elementwise colour kernels, numpy's BLAS-backed path for the
  conv/pool kernels; numpy everywhere if numba is missing
* ``numba``: force the JIT lane for everything, raise if numba is missing
* ``numpy``: force the fallback for everything

``benchmarks/bench_kernels.py`` times the two lanes against each other.
"""

from __future__ import annotations

import os

from camopatch._kernels import numpy_impl

# workqueue is always available; avoids numba's noisy TBB version probe
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

_choice = os.environ.get("CAMOPATCH_BACKEND", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"CAMOPATCH_BACKEND must be auto, numba or numpy, got {_choice!r}"
    )

if _choice == "numpy":
    _color_impl = _conv_impl = _pool_impl = numpy_impl
else:
    try:
        from camopatch._kernels import numba_impl

        _color_impl = _pool_impl = numba_impl
        # measured (benchmarks/bench_kernels.py): BLAS tensordot beats njit
        # loops for the small-channel convolutions 3-5x, while njit wins the
        # colour kernels and pooling
        _conv_impl = numpy_impl if _choice == "auto" else numba_impl
    except ImportError:
        if _choice == "numba":
            raise
        _color_impl = _conv_impl = _pool_impl = numpy_impl


def active_backend() -> str:
    """Kernel lane in use: 'numba', 'numpy', or 'mixed' (auto split)."""
    if _color_impl is numpy_impl and _conv_impl is numpy_impl:
        return "numpy"
    if _color_impl is not numpy_impl and _conv_impl is not numpy_impl:
        return "numba"
    return "mixed"


srgb_to_lab = _color_impl.srgb_to_lab
lab_to_srgb = _color_impl.lab_to_srgb
srgb_to_lab_jacobian = _color_impl.srgb_to_lab_jacobian
ciede2000 = _color_impl.ciede2000
ciede2000_sq_grad = _color_impl.ciede2000_sq_grad
conv2d = _conv_impl.conv2d
conv2d_input_grad = _conv_impl.conv2d_input_grad
conv2d_weight_grad = _conv_impl.conv2d_weight_grad
maxpool2 = _pool_impl.maxpool2
maxpool2_grad = _pool_impl.maxpool2_grad

__all__ = [
    "active_backend",
    "srgb_to_lab",
    "lab_to_srgb",
    "srgb_to_lab_jacobian",
    "ciede2000",
    "ciede2000_sq_grad",
    "conv2d",
    "conv2d_input_grad",
    "conv2d_weight_grad",
    "maxpool2",
    "maxpool2_grad",
]
