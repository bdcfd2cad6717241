"""Numba kernel lane.

JIT-compiled mirrors of ``numpy_impl``: same signatures, same branch logic,
scalar inner loops instead of vectorized array ops. Gradients use forward-mode
duals carried as (value, dL, da, db) tuples so the formula reads like the
plain one.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from camopatch._kernels.numpy_impl import (
    _LAB_EPS,
    _LAB_KAPPA,
    _M_RGB_TO_XYZ,
    _M_XYZ_TO_RGB,
    _POW25_7,
    _WHITE,
)

_M = _M_RGB_TO_XYZ
_MI = _M_XYZ_TO_RGB
_W = _WHITE


@njit(cache=True, inline="always")
def _gamma_expand(s):
    if s <= 0.04045:
        return s / 12.92
    return ((s + 0.055) / 1.055) ** 2.4


@njit(cache=True, inline="always")
def _gamma_expand_deriv(s):
    if s <= 0.04045:
        return 1.0 / 12.92
    return (2.4 / 1.055) * ((s + 0.055) / 1.055) ** 1.4


@njit(cache=True, inline="always")
def _lab_f(t):
    if t > _LAB_EPS:
        return t ** (1.0 / 3.0)
    return (_LAB_KAPPA * t + 16.0) / 116.0


@njit(cache=True, inline="always")
def _lab_f_deriv(t):
    if t > _LAB_EPS:
        return t ** (-2.0 / 3.0) / 3.0
    return _LAB_KAPPA / 116.0


@njit(cache=True)
def _srgb_to_lab_flat(rgb, m, white, out):
    n = rgb.shape[0]
    for i in range(n):
        r = _gamma_expand(rgb[i, 0] / 255.0)
        g = _gamma_expand(rgb[i, 1] / 255.0)
        b = _gamma_expand(rgb[i, 2] / 255.0)
        fx = _lab_f((m[0, 0] * r + m[0, 1] * g + m[0, 2] * b) / white[0])
        fy = _lab_f((m[1, 0] * r + m[1, 1] * g + m[1, 2] * b) / white[1])
        fz = _lab_f((m[2, 0] * r + m[2, 1] * g + m[2, 2] * b) / white[2])
        out[i, 0] = 116.0 * fy - 16.0
        out[i, 1] = 500.0 * (fx - fy)
        out[i, 2] = 200.0 * (fy - fz)


@njit(cache=True)
def _lab_to_srgb_flat(lab, mi, white, out):
    n = lab.shape[0]
    fs = np.empty(3)
    t = np.empty(3)
    for i in range(n):
        fy = (lab[i, 0] + 16.0) / 116.0
        fs[0] = fy + lab[i, 1] / 500.0
        fs[1] = fy
        fs[2] = fy - lab[i, 2] / 200.0
        for k in range(3):
            f = fs[k]
            if f**3 > _LAB_EPS:
                t[k] = f**3
            else:
                t[k] = (116.0 * f - 16.0) / _LAB_KAPPA
            t[k] *= white[k]
        for k in range(3):
            lin = mi[k, 0] * t[0] + mi[k, 1] * t[1] + mi[k, 2] * t[2]
            if lin <= 0.0031308:
                s = 12.92 * lin
            else:
                s = 1.055 * abs(lin) ** (1.0 / 2.4) - 0.055
            out[i, k] = 255.0 * s


@njit(cache=True)
def _srgb_to_lab_jac_flat(rgb, m, white, out):
    n = rgb.shape[0]
    for i in range(n):
        lin = np.empty(3)
        dlin = np.empty(3)
        for k in range(3):
            s = rgb[i, k] / 255.0
            lin[k] = _gamma_expand(s)
            dlin[k] = _gamma_expand_deriv(s) / 255.0
        df = np.empty(3)
        for k in range(3):
            t = (m[k, 0] * lin[0] + m[k, 1] * lin[1] + m[k, 2] * lin[2]) / white[k]
            df[k] = _lab_f_deriv(t)
        for j in range(3):
            dfx = df[0] * m[0, j] / white[0] * dlin[j]
            dfy = df[1] * m[1, j] / white[1] * dlin[j]
            dfz = df[2] * m[2, j] / white[2] * dlin[j]
            out[i, 0, j] = 116.0 * dfy
            out[i, 1, j] = 500.0 * (dfx - dfy)
            out[i, 2, j] = 200.0 * (dfy - dfz)


@njit(cache=True, inline="always")
def _de2000_scalar(l1, a1, b1, l2, a2, b2):
    c1 = math.hypot(a1, b1)
    c2 = math.hypot(a2, b2)
    cbar7 = ((c1 + c2) / 2.0) ** 7
    g = 0.5 * (1.0 - math.sqrt(cbar7 / (cbar7 + _POW25_7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = math.hypot(a1p, b1)
    c2p = math.hypot(a2p, b2)

    if a1p == 0.0 and b1 == 0.0:
        h1p = 0.0
    else:
        h1p = math.atan2(b1, a1p)
        if h1p < 0.0:
            h1p += 2.0 * math.pi
    if a2p == 0.0 and b2 == 0.0:
        h2p = 0.0
    else:
        h2p = math.atan2(b2, a2p)
        if h2p < 0.0:
            h2p += 2.0 * math.pi

    dlp = l2 - l1
    dcp = c2p - c1p
    prod = c1p * c2p
    dh = h2p - h1p
    if dh > math.pi:
        dh -= 2.0 * math.pi
    elif dh < -math.pi:
        dh += 2.0 * math.pi
    if prod == 0.0:
        dh = 0.0
    dhp = 2.0 * math.sqrt(prod) * math.sin(dh / 2.0)

    lbar = (l1 + l2) / 2.0
    cbarp = (c1p + c2p) / 2.0
    hsum = h1p + h2p
    if prod == 0.0:
        hbar = hsum
    elif abs(h1p - h2p) <= math.pi:
        hbar = hsum / 2.0
    elif hsum < 2.0 * math.pi:
        hbar = hsum / 2.0 + math.pi
    else:
        hbar = hsum / 2.0 - math.pi

    t = (
        1.0
        - 0.17 * math.cos(hbar - math.pi / 6.0)
        + 0.24 * math.cos(2.0 * hbar)
        + 0.32 * math.cos(3.0 * hbar + math.pi / 30.0)
        - 0.20 * math.cos(4.0 * hbar - 63.0 * math.pi / 180.0)
    )
    hdeg = hbar * (180.0 / math.pi)
    if hdeg < 0.0:
        hdeg += 360.0
    elif hdeg > 360.0:
        hdeg -= 360.0
    dtheta = 30.0 * math.exp(-(((hdeg - 275.0) / 25.0) ** 2))
    cbarp7 = cbarp**7
    rc = 2.0 * math.sqrt(cbarp7 / (cbarp7 + _POW25_7))
    rt = -math.sin(2.0 * dtheta * math.pi / 180.0) * rc

    lm50 = (lbar - 50.0) ** 2
    sl = 1.0 + 0.015 * lm50 / math.sqrt(20.0 + lm50)
    sc = 1.0 + 0.045 * cbarp
    sh = 1.0 + 0.015 * cbarp * t

    fl = dlp / sl
    fc = dcp / sc
    fh = dhp / sh
    return math.sqrt(fl * fl + fc * fc + fh * fh + rt * fc * fh)


@njit(cache=True, parallel=True)
def _de2000_flat(lab1, lab2, out):
    for i in prange(lab1.shape[0]):
        out[i] = _de2000_scalar(
            lab1[i, 0], lab1[i, 1], lab1[i, 2], lab2[i, 0], lab2[i, 1], lab2[i, 2]
        )


# ---- forward-mode duals: (value, dL1, da1, db1) tuples --------------------


@njit(cache=True, inline="always")
def _dadd(a, b):
    return (a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3])


@njit(cache=True, inline="always")
def _dsub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3])


@njit(cache=True, inline="always")
def _dmul(a, b):
    return (
        a[0] * b[0],
        a[0] * b[1] + a[1] * b[0],
        a[0] * b[2] + a[2] * b[0],
        a[0] * b[3] + a[3] * b[0],
    )


@njit(cache=True, inline="always")
def _dscale(a, s):
    return (a[0] * s, a[1] * s, a[2] * s, a[3] * s)


@njit(cache=True, inline="always")
def _dshift(a, s):
    return (a[0] + s, a[1], a[2], a[3])


@njit(cache=True, inline="always")
def _ddiv(a, b):
    v = a[0] / b[0]
    return (
        v,
        (a[1] - v * b[1]) / b[0],
        (a[2] - v * b[2]) / b[0],
        (a[3] - v * b[3]) / b[0],
    )


@njit(cache=True, inline="always")
def _dsqrt(a):
    v = math.sqrt(a[0])
    if v > 0.0:
        s = 0.5 / v
        return (v, a[1] * s, a[2] * s, a[3] * s)
    return (v, 0.0, 0.0, 0.0)


@njit(cache=True, inline="always")
def _dsin(a):
    c = math.cos(a[0])
    return (math.sin(a[0]), a[1] * c, a[2] * c, a[3] * c)


@njit(cache=True, inline="always")
def _dcos(a):
    s = -math.sin(a[0])
    return (math.cos(a[0]), a[1] * s, a[2] * s, a[3] * s)


@njit(cache=True, inline="always")
def _dexp(a):
    v = math.exp(a[0])
    return (v, a[1] * v, a[2] * v, a[3] * v)


@njit(cache=True, inline="always")
def _dpow7(a):
    d = 7.0 * a[0] ** 6
    return (a[0] ** 7, a[1] * d, a[2] * d, a[3] * d)


@njit(cache=True, inline="always")
def _datan2(y, x):
    v = math.atan2(y[0], x[0])
    r2 = x[0] * x[0] + y[0] * y[0]
    if r2 > 0.0:
        return (
            v,
            (x[0] * y[1] - y[0] * x[1]) / r2,
            (x[0] * y[2] - y[0] * x[2]) / r2,
            (x[0] * y[3] - y[0] * x[3]) / r2,
        )
    return (v, 0.0, 0.0, 0.0)


@njit(cache=True, inline="always")
def _dhypot(a, b):
    return _dsqrt(_dadd(_dmul(a, a), _dmul(b, b)))


@njit(cache=True, inline="always")
def _dhue(a, b):
    if a[0] == 0.0 and b[0] == 0.0:
        return (0.0, 0.0, 0.0, 0.0)
    h = _datan2(b, a)
    if h[0] < 0.0:
        return (h[0] + 2.0 * math.pi, h[1], h[2], h[3])
    return h


@njit(cache=True)
def _de2000_sq_dual(l1v, a1v, b1v, l2v, a2v, b2v):
    l1 = (l1v, 1.0, 0.0, 0.0)
    a1 = (a1v, 0.0, 1.0, 0.0)
    b1 = (b1v, 0.0, 0.0, 1.0)
    l2 = (l2v, 0.0, 0.0, 0.0)
    a2 = (a2v, 0.0, 0.0, 0.0)
    b2 = (b2v, 0.0, 0.0, 0.0)

    c1 = _dhypot(a1, b1)
    c2 = _dhypot(a2, b2)
    cbar7 = _dpow7(_dscale(_dadd(c1, c2), 0.5))
    ratio = _ddiv(cbar7, _dshift(cbar7, _POW25_7))
    g = _dscale(_dshift(_dscale(_dsqrt(ratio), -1.0), 1.0), 0.5)
    gp1 = _dshift(g, 1.0)
    a1p = _dmul(gp1, a1)
    a2p = _dmul(gp1, a2)
    c1p = _dhypot(a1p, b1)
    c2p = _dhypot(a2p, b2)
    h1p = _dhue(a1p, b1)
    h2p = _dhue(a2p, b2)

    dlp = _dsub(l2, l1)
    dcp = _dsub(c2p, c1p)
    prod = _dmul(c1p, c2p)
    dh = _dsub(h2p, h1p)
    if dh[0] > math.pi:
        dh = _dshift(dh, -2.0 * math.pi)
    elif dh[0] < -math.pi:
        dh = _dshift(dh, 2.0 * math.pi)
    if prod[0] == 0.0:
        dh = (0.0, 0.0, 0.0, 0.0)
    dhp = _dscale(_dmul(_dsqrt(prod), _dsin(_dscale(dh, 0.5))), 2.0)

    lbar = _dscale(_dadd(l1, l2), 0.5)
    cbarp = _dscale(_dadd(c1p, c2p), 0.5)
    hsum = _dadd(h1p, h2p)
    if prod[0] == 0.0:
        hbar = hsum
    elif abs(h1p[0] - h2p[0]) <= math.pi:
        hbar = _dscale(hsum, 0.5)
    elif hsum[0] < 2.0 * math.pi:
        hbar = _dshift(_dscale(hsum, 0.5), math.pi)
    else:
        hbar = _dshift(_dscale(hsum, 0.5), -math.pi)

    t = _dshift(
        _dadd(
            _dadd(
                _dscale(_dcos(_dshift(hbar, -math.pi / 6.0)), -0.17),
                _dscale(_dcos(_dscale(hbar, 2.0)), 0.24),
            ),
            _dadd(
                _dscale(_dcos(_dshift(_dscale(hbar, 3.0), math.pi / 30.0)), 0.32),
                _dscale(
                    _dcos(_dshift(_dscale(hbar, 4.0), -63.0 * math.pi / 180.0)), -0.20
                ),
            ),
        ),
        1.0,
    )
    hdeg = _dscale(hbar, 180.0 / math.pi)
    if hdeg[0] < 0.0:
        hdeg = _dshift(hdeg, 360.0)
    elif hdeg[0] > 360.0:
        hdeg = _dshift(hdeg, -360.0)
    u = _dscale(_dshift(hdeg, -275.0), 1.0 / 25.0)
    dtheta = _dscale(_dexp(_dscale(_dmul(u, u), -1.0)), 30.0)
    cbarp7 = _dpow7(cbarp)
    rc = _dscale(_dsqrt(_ddiv(cbarp7, _dshift(cbarp7, _POW25_7))), 2.0)
    rt = _dscale(_dmul(_dsin(_dscale(dtheta, 2.0 * math.pi / 180.0)), rc), -1.0)

    lm50 = _dmul(_dshift(lbar, -50.0), _dshift(lbar, -50.0))
    sl = _dshift(_dscale(_ddiv(lm50, _dsqrt(_dshift(lm50, 20.0))), 0.015), 1.0)
    sc = _dshift(_dscale(cbarp, 0.045), 1.0)
    sh = _dshift(_dscale(_dmul(cbarp, t), 0.015), 1.0)

    fl = _ddiv(dlp, sl)
    fc = _ddiv(dcp, sc)
    fh = _ddiv(dhp, sh)
    sq = _dadd(
        _dadd(_dmul(fl, fl), _dmul(fc, fc)),
        _dadd(_dmul(fh, fh), _dmul(rt, _dmul(fc, fh))),
    )
    return sq


@njit(cache=True, parallel=True)
def _de2000_sq_grad_flat(lab1, lab2, sq, grad):
    for i in prange(lab1.shape[0]):
        d = _de2000_sq_dual(
            lab1[i, 0], lab1[i, 1], lab1[i, 2], lab2[i, 0], lab2[i, 1], lab2[i, 2]
        )
        sq[i] = d[0]
        grad[i, 0] = d[1]
        grad[i, 1] = d[2]
        grad[i, 2] = d[3]


# ---- public wrappers (match numpy_impl signatures) -------------------------


def srgb_to_lab(rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    flat = rgb.reshape(-1, 3)
    out = np.empty_like(flat)
    _srgb_to_lab_flat(flat, _M, _W, out)
    return out.reshape(rgb.shape)


def lab_to_srgb(lab):
    lab = np.ascontiguousarray(lab, dtype=np.float64)
    flat = lab.reshape(-1, 3)
    out = np.empty_like(flat)
    _lab_to_srgb_flat(flat, _MI, _W, out)
    return out.reshape(lab.shape)


def srgb_to_lab_jacobian(rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    flat = rgb.reshape(-1, 3)
    out = np.empty((flat.shape[0], 3, 3))
    _srgb_to_lab_jac_flat(flat, _M, _W, out)
    return out.reshape(rgb.shape + (3,))


def ciede2000(lab1, lab2):
    lab1 = np.ascontiguousarray(lab1, dtype=np.float64)
    lab2 = np.ascontiguousarray(lab2, dtype=np.float64)
    f1 = lab1.reshape(-1, 3)
    f2 = np.broadcast_to(lab2, lab1.shape).reshape(-1, 3)
    f2 = np.ascontiguousarray(f2)
    out = np.empty(f1.shape[0])
    _de2000_flat(f1, f2, out)
    return out.reshape(lab1.shape[:-1])


def ciede2000_sq_grad(lab1, lab2):
    lab1 = np.ascontiguousarray(lab1, dtype=np.float64)
    lab2 = np.ascontiguousarray(lab2, dtype=np.float64)
    f1 = lab1.reshape(-1, 3)
    f2 = np.ascontiguousarray(np.broadcast_to(lab2, lab1.shape).reshape(-1, 3))
    sq = np.empty(f1.shape[0])
    grad = np.empty_like(f1)
    _de2000_sq_grad_flat(f1, f2, sq, grad)
    return sq.reshape(lab1.shape[:-1]), grad.reshape(lab1.shape)


@njit(cache=True, parallel=True)
def _conv2d_kernel(x, w, b, pad, y):
    n, c, h, wd = x.shape
    f = w.shape[0]
    k = w.shape[2]
    ho = y.shape[2]
    wo = y.shape[3]
    for nf in prange(n * f):
        ni = nf // f
        fi = nf % f
        acc = np.full((ho, wo), b[fi])
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    wv = w[fi, ci, i, j]
                    for hh in range(ho):
                        ih = hh + i - pad
                        if ih < 0 or ih >= h:
                            continue
                        lo = max(0, pad - j)
                        hi = min(wo, wd + pad - j)
                        for ww in range(lo, hi):
                            acc[hh, ww] += wv * x[ni, ci, ih, ww + j - pad]
        y[ni, fi] = acc


def conv2d(x, w, b, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho = h + 2 * pad - k + 1
    wo = wd + 2 * pad - k + 1
    y = np.empty((n, f, ho, wo))
    _conv2d_kernel(
        np.ascontiguousarray(x),
        np.ascontiguousarray(w),
        np.ascontiguousarray(b),
        pad,
        y,
    )
    return y


@njit(cache=True, parallel=True)
def _conv2d_input_grad_kernel(dy, w, pad, dx):
    n, f, ho, wo = dy.shape
    c = w.shape[1]
    k = w.shape[2]
    h = dx.shape[2]
    wd = dx.shape[3]
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        acc = np.zeros((h, wd))
        for fi in range(f):
            for i in range(k):
                for j in range(k):
                    wv = w[fi, ci, i, j]
                    for hh in range(ho):
                        ih = hh + i - pad
                        if ih < 0 or ih >= h:
                            continue
                        lo = max(0, pad - j)
                        hi = min(wo, wd + pad - j)
                        for ww in range(lo, hi):
                            acc[ih, ww + j - pad] += wv * dy[ni, fi, hh, ww]
        dx[ni, ci] = acc


def conv2d_input_grad(dy, w, pad, h, wd):
    n = dy.shape[0]
    c = w.shape[1]
    dx = np.empty((n, c, h, wd))
    _conv2d_input_grad_kernel(
        np.ascontiguousarray(dy), np.ascontiguousarray(w), pad, dx
    )
    return dx


@njit(cache=True, parallel=True)
def _conv2d_weight_grad_kernel(dy, x, pad, dw, db):
    n, f, ho, wo = dy.shape
    c = x.shape[1]
    h = x.shape[2]
    wd = x.shape[3]
    k = dw.shape[2]
    for fi in prange(f):
        s = 0.0
        for ni in range(n):
            for hh in range(ho):
                for ww in range(wo):
                    s += dy[ni, fi, hh, ww]
        db[fi] = s
        for ci in range(c):
            for i in range(k):
                for j in range(k):
                    acc = 0.0
                    for ni in range(n):
                        for hh in range(ho):
                            ih = hh + i - pad
                            if ih < 0 or ih >= h:
                                continue
                            lo = max(0, pad - j)
                            hi = min(wo, wd + pad - j)
                            for ww in range(lo, hi):
                                acc += dy[ni, fi, hh, ww] * x[ni, ci, ih, ww + j - pad]
                    dw[fi, ci, i, j] = acc


def conv2d_weight_grad(dy, x, k, pad):
    f = dy.shape[1]
    c = x.shape[1]
    dw = np.empty((f, c, k, k))
    db = np.empty(f)
    _conv2d_weight_grad_kernel(
        np.ascontiguousarray(dy), np.ascontiguousarray(x), pad, dw, db
    )
    return dw, db


@njit(cache=True, parallel=True)
def _maxpool2_kernel(x, y, idx):
    n, c, ho, wo = y.shape
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        for hh in range(ho):
            for ww in range(wo):
                best = x[ni, ci, 2 * hh, 2 * ww]
                bi = 0
                v = x[ni, ci, 2 * hh, 2 * ww + 1]
                if v > best:
                    best = v
                    bi = 1
                v = x[ni, ci, 2 * hh + 1, 2 * ww]
                if v > best:
                    best = v
                    bi = 2
                v = x[ni, ci, 2 * hh + 1, 2 * ww + 1]
                if v > best:
                    best = v
                    bi = 3
                y[ni, ci, hh, ww] = best
                idx[ni, ci, hh, ww] = bi


def maxpool2(x):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2))
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int64)
    _maxpool2_kernel(np.ascontiguousarray(x), y, idx)
    return y, idx


@njit(cache=True, parallel=True)
def _maxpool2_grad_kernel(dy, idx, dx):
    n, c, ho, wo = dy.shape
    for nc in prange(n * c):
        ni = nc // c
        ci = nc % c
        for hh in range(ho):
            for ww in range(wo):
                k = idx[ni, ci, hh, ww]
                dx[ni, ci, 2 * hh + k // 2, 2 * ww + k % 2] += dy[ni, ci, hh, ww]


def maxpool2_grad(dy, idx, h, w):
    n, c = dy.shape[0], dy.shape[1]
    dx = np.zeros((n, c, h, w))
    _maxpool2_grad_kernel(np.ascontiguousarray(dy), idx, dx)
    return dx
