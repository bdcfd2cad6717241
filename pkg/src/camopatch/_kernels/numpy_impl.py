"""Pure-numpy kernel lane.

Vectorized reference implementations of the hot kernels: sRGB<->CIELAB
conversion (with jacobian), the CIEDE2000 colour difference (values and the
gradient of its square w.r.t. the first Lab operand), and the small-kernel
conv/pool primitives backing the toy detector. The numba lane in
``numba_impl.py`` mirrors these signatures exactly.
"""

from __future__ import annotations

import numpy as np

# sRGB primaries -> XYZ, D65 white, 2 deg observer. Rows sum to the white
# point, so (255,255,255) maps to L=100, a=b=0 exactly.
_M_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_M_XYZ_TO_RGB = np.linalg.inv(_M_RGB_TO_XYZ)
# white point taken as the exact row sums so the conversion is self-consistent
_WHITE = _M_RGB_TO_XYZ.sum(axis=1)

_LAB_EPS = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0

_POW25_7 = 25.0**7


def srgb_to_lab(rgb):
    """sRGB channels in [0, 255] -> CIELAB. Shape (..., 3) preserved.

    Total on all finite inputs: below the gamma knee the linear segment
    extends to negative values, so transiently unclipped pixels stay finite.
    """
    s = np.asarray(rgb, dtype=np.float64) / 255.0
    gamma_base = np.where(s <= 0.04045, 1.0, (s + 0.055) / 1.055)
    lin = np.where(s <= 0.04045, s / 12.92, gamma_base**2.4)
    xyz = lin @ _M_RGB_TO_XYZ.T
    t = xyz / _WHITE
    f = np.where(t > _LAB_EPS, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    return np.stack(
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1
    )


def lab_to_srgb(lab):
    """Inverse of :func:`srgb_to_lab`; output in [0, 255] for in-gamut Lab."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f**3 > _LAB_EPS, f**3, (116.0 * f - 16.0) / _LAB_KAPPA)
    lin = (t * _WHITE) @ _M_XYZ_TO_RGB.T
    s = np.where(
        lin <= 0.0031308, 12.92 * lin, 1.055 * np.abs(lin) ** (1 / 2.4) - 0.055
    )
    return 255.0 * s


def srgb_to_lab_jacobian(rgb):
    """d(Lab)/d(RGB) per pixel: shape (..., 3, 3), J[..., i, j] = dLab_i/dRGB_j."""
    s = np.asarray(rgb, dtype=np.float64) / 255.0
    gamma_base = np.where(s <= 0.04045, 1.0, (s + 0.055) / 1.055)
    lin = np.where(s <= 0.04045, s / 12.92, gamma_base**2.4)
    # d(linear)/d(channel in 0..255)
    dlin = np.where(
        s <= 0.04045,
        1.0 / 12.92,
        (2.4 / 1.055) * gamma_base**1.4,
    ) / 255.0
    t = (lin @ _M_RGB_TO_XYZ.T) / _WHITE
    t_safe = np.where(t > _LAB_EPS, t, 1.0)
    df = np.where(
        t > _LAB_EPS,
        np.cbrt(t_safe) ** -2 / 3.0,
        _LAB_KAPPA / 116.0,
    )
    # dLab_i/dRGB_j = A[i, xyz] * df[xyz] * (M[xyz, j]/white[xyz]) * dlin[j]
    a_rows = np.array([[0.0, 116.0, 0.0], [500.0, -500.0, 0.0], [0.0, 200.0, -200.0]])
    m_scaled = _M_RGB_TO_XYZ / _WHITE[:, None]
    # inner[..., xyz, j]
    inner = df[..., :, None] * m_scaled * dlin[..., None, :]
    return np.einsum("ik,...kj->...ij", a_rows, inner)


def _hue_angle(a, b):
    """atan2 wrapped into [0, 2*pi), zero at the achromatic origin."""
    h = np.arctan2(b, a)
    h = np.where(h < 0.0, h + 2.0 * np.pi, h)
    return np.where((a == 0.0) & (b == 0.0), 0.0, h)


def ciede2000(lab1, lab2):
    """CIEDE2000 with kL=kC=kH=1 over matching (..., 3) Lab arrays."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    cbar7 = ((c1 + c2) / 2.0) ** 7
    g = 0.5 * (1.0 - np.sqrt(cbar7 / (cbar7 + _POW25_7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    h1p = _hue_angle(a1p, b1)
    h2p = _hue_angle(a2p, b2)

    dlp = l2 - l1
    dcp = c2p - c1p
    chroma_prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > np.pi, dh - 2.0 * np.pi, dh)
    dh = np.where(dh < -np.pi, dh + 2.0 * np.pi, dh)
    dh = np.where(chroma_prod == 0.0, 0.0, dh)
    dhp = 2.0 * np.sqrt(chroma_prod) * np.sin(dh / 2.0)

    lbar = (l1 + l2) / 2.0
    cbarp = (c1p + c2p) / 2.0
    hsum = h1p + h2p
    habs = np.abs(h1p - h2p)
    hbar = np.where(
        habs <= np.pi,
        hsum / 2.0,
        np.where(hsum < 2.0 * np.pi, hsum / 2.0 + np.pi, hsum / 2.0 - np.pi),
    )
    hbar = np.where(chroma_prod == 0.0, hsum, hbar)

    t = (
        1.0
        - 0.17 * np.cos(hbar - np.pi / 6.0)
        + 0.24 * np.cos(2.0 * hbar)
        + 0.32 * np.cos(3.0 * hbar + np.pi / 30.0)
        - 0.20 * np.cos(4.0 * hbar - 63.0 * np.pi / 180.0)
    )
    hdeg = np.degrees(hbar)
    hdeg = np.where(hdeg < 0.0, hdeg + 360.0, hdeg)
    hdeg = np.where(hdeg > 360.0, hdeg - 360.0, hdeg)
    dtheta = 30.0 * np.exp(-(((hdeg - 275.0) / 25.0) ** 2))
    cbarp7 = cbarp**7
    rc = 2.0 * np.sqrt(cbarp7 / (cbarp7 + _POW25_7))
    rt = -np.sin(np.radians(2.0 * dtheta)) * rc

    lm50 = (lbar - 50.0) ** 2
    sl = 1.0 + 0.015 * lm50 / np.sqrt(20.0 + lm50)
    sc = 1.0 + 0.045 * cbarp
    sh = 1.0 + 0.015 * cbarp * t

    fl = dlp / sl
    fc = dcp / sc
    fh = dhp / sh
    return np.sqrt(fl**2 + fc**2 + fh**2 + rt * fc * fh)


class _Dual:
    """Forward-mode value + 3-component gradient, vectorized over pixels.

    ``v`` has pixel shape, ``g`` has pixel shape + (3,) carrying the partials
    w.r.t. the first operand's (L, a, b).
    """

    __slots__ = ("v", "g")

    def __init__(self, v, g):
        self.v = v
        self.g = g

    @staticmethod
    def const(v, shape):
        return _Dual(np.broadcast_to(np.asarray(v, dtype=np.float64), shape).copy(),
                     np.zeros(shape + (3,)))

    @staticmethod
    def seed(v, component, shape):
        g = np.zeros(shape + (3,))
        g[..., component] = 1.0
        return _Dual(np.broadcast_to(np.asarray(v, dtype=np.float64), shape).copy(), g)

    def _lift(self, other):
        if isinstance(other, _Dual):
            return other
        return _Dual(np.asarray(other, dtype=np.float64), np.zeros(self.v.shape + (3,)))

    def __add__(self, other):
        o = self._lift(other)
        return _Dual(self.v + o.v, self.g + o.g)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return _Dual(self.v - o.v, self.g - o.g)

    def __rsub__(self, other):
        o = self._lift(other)
        return _Dual(o.v - self.v, o.g - self.g)

    def __mul__(self, other):
        o = self._lift(other)
        return _Dual(self.v * o.v, self.g * o.v[..., None] + o.g * self.v[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        inv = 1.0 / o.v
        v = self.v * inv
        return _Dual(v, (self.g - o.g * v[..., None]) * inv[..., None])

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return _Dual(-self.v, -self.g)


def _dsqrt(d):
    # subgradient 0 at the origin keeps achromatic pixels finite
    v = np.sqrt(d.v)
    safe = np.where(v > 0.0, v, 1.0)
    dvdx = np.where(v > 0.0, 0.5 / safe, 0.0)
    return _Dual(v, d.g * dvdx[..., None])


def _dsin(d):
    return _Dual(np.sin(d.v), d.g * np.cos(d.v)[..., None])


def _dcos(d):
    return _Dual(np.cos(d.v), d.g * (-np.sin(d.v))[..., None])


def _dexp(d):
    v = np.exp(d.v)
    return _Dual(v, d.g * v[..., None])


def _dpow7(d):
    return _Dual(d.v**7, d.g * (7.0 * d.v**6)[..., None])


def _datan2(y, x):
    # d atan2 = (x dy - y dx)/(x^2+y^2); zero at the origin
    r2 = x.v**2 + y.v**2
    safe = np.where(r2 > 0.0, r2, 1.0)
    num = y.g * x.v[..., None] - x.g * y.v[..., None]
    g = np.where(r2[..., None] > 0.0, num / safe[..., None], 0.0)
    return _Dual(np.arctan2(y.v, x.v), g)


def _dwhere(cond, a, b):
    c = cond[..., None]
    return _Dual(np.where(cond, a.v, b.v), np.where(c, a.g, b.g))


def _dhypot(a, b):
    return _dsqrt(a * a + b * b)


def _dhue(a, b):
    h = _datan2(b, a)
    h = _dwhere(h.v < 0.0, h + 2.0 * np.pi, h)
    zero = _Dual.const(0.0, h.v.shape)
    return _dwhere((a.v == 0.0) & (b.v == 0.0), zero, h)


def ciede2000_sq_grad(lab1, lab2):
    """Squared CIEDE2000 and its gradient w.r.t. lab1.

    Returns ``(sq, grad)`` with ``sq`` of pixel shape and ``grad`` of pixel
    shape + (3,). Differentiating the square (not the root) keeps the result
    finite at identical pixels.
    """
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    shape = lab1.shape[:-1]
    l1 = _Dual.seed(lab1[..., 0], 0, shape)
    a1 = _Dual.seed(lab1[..., 1], 1, shape)
    b1 = _Dual.seed(lab1[..., 2], 2, shape)
    l2 = _Dual.const(lab2[..., 0], shape)
    a2 = _Dual.const(lab2[..., 1], shape)
    b2 = _Dual.const(lab2[..., 2], shape)

    c1 = _dhypot(a1, b1)
    c2 = _dhypot(a2, b2)
    cbar7 = _dpow7((c1 + c2) * 0.5)
    g = 0.5 * (1.0 - _dsqrt(cbar7 / (cbar7 + _POW25_7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = _dhypot(a1p, b1)
    c2p = _dhypot(a2p, b2)
    h1p = _dhue(a1p, b1)
    h2p = _dhue(a2p, b2)

    dlp = l2 - l1
    dcp = c2p - c1p
    chroma_prod = c1p * c2p
    achromatic = chroma_prod.v == 0.0
    dh = h2p - h1p
    dh = _dwhere(dh.v > np.pi, dh - 2.0 * np.pi, dh)
    dh = _dwhere(dh.v < -np.pi, dh + 2.0 * np.pi, dh)
    dh = _dwhere(achromatic, _Dual.const(0.0, shape), dh)
    dhp = 2.0 * _dsqrt(chroma_prod) * _dsin(dh * 0.5)

    lbar = (l1 + l2) * 0.5
    cbarp = (c1p + c2p) * 0.5
    hsum = h1p + h2p
    habs = np.abs(h1p.v - h2p.v)
    hbar = _dwhere(
        habs <= np.pi,
        hsum * 0.5,
        _dwhere(hsum.v < 2.0 * np.pi, hsum * 0.5 + np.pi, hsum * 0.5 - np.pi),
    )
    hbar = _dwhere(achromatic, hsum, hbar)

    t = (
        1.0
        - 0.17 * _dcos(hbar - np.pi / 6.0)
        + 0.24 * _dcos(hbar * 2.0)
        + 0.32 * _dcos(hbar * 3.0 + np.pi / 30.0)
        - 0.20 * _dcos(hbar * 4.0 - 63.0 * np.pi / 180.0)
    )
    hdeg = hbar * (180.0 / np.pi)
    hdeg = _dwhere(hdeg.v < 0.0, hdeg + 360.0, hdeg)
    hdeg = _dwhere(hdeg.v > 360.0, hdeg - 360.0, hdeg)
    u = (hdeg - 275.0) / 25.0
    dtheta = 30.0 * _dexp(-(u * u))
    cbarp7 = _dpow7(cbarp)
    rc = 2.0 * _dsqrt(cbarp7 / (cbarp7 + _POW25_7))
    rt = -_dsin(dtheta * (2.0 * np.pi / 180.0)) * rc

    lm50 = (lbar - 50.0) * (lbar - 50.0)
    sl = 1.0 + 0.015 * lm50 / _dsqrt(lm50 + 20.0)
    sc = 1.0 + 0.045 * cbarp
    sh = 1.0 + 0.015 * cbarp * t

    fl = dlp / sl
    fc = dcp / sc
    fh = dhp / sh
    sq = fl * fl + fc * fc + fh * fh + rt * fc * fh
    return sq.v, sq.g


def conv2d(x, w, b, pad):
    """Stride-1 correlation of NCHW input with FCkk weights plus bias."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = h + 2 * pad - k + 1
    wo = wd + 2 * pad - k + 1
    out = np.zeros((f, n, ho, wo))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(w[:, :, i, j], xp[:, :, i : i + ho, j : j + wo], axes=([1], [1]))
    return out.transpose(1, 0, 2, 3) + b[None, :, None, None]


def conv2d_input_grad(dy, w, pad, h, wd):
    """Gradient of conv2d w.r.t. its input."""
    n, f, ho, wo = dy.shape
    _, c, k, _ = w.shape
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + ho, j : j + wo] += np.tensordot(
                w[:, :, i, j], dy, axes=([0], [1])
            )
    dxp = dxp.transpose(1, 0, 2, 3)
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + wd]
    return dxp


def conv2d_weight_grad(dy, x, k, pad):
    """Gradients of conv2d w.r.t. weights and bias."""
    n, c, h, wd = x.shape
    f = dy.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = dy.shape[2], dy.shape[3]
    dw = np.empty((f, c, k, k))
    for i in range(k):
        for j in range(k):
            dw[:, :, i, j] = np.tensordot(
                dy, xp[:, :, i : i + ho, j : j + wo], axes=([0, 2, 3], [0, 2, 3])
            )
    return dw, dy.sum(axis=(0, 2, 3))


def maxpool2(x):
    """2x2 stride-2 max pool; returns pooled values and flat argmax in {0..3}."""
    n, c, h, w = x.shape
    xr = (
        x.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.int64)


def maxpool2_grad(dy, idx, h, w):
    """Scatter pooled gradients back through the recorded argmax."""
    n, c, ho, wo = dy.shape
    dxr = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    return (
        dxr.reshape(n, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
