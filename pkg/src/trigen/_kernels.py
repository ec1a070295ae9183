"""Hot inner kernels for bilinear plane sampling.

numba-compiled when available, with equivalent (slower) numpy fallbacks.
Planes are handled row-major here: (H*W, C) with row index y*W + x.
"""

from __future__ import annotations

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False


def _gather_np(rows, i00, stride, fx, fy):
    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    return (w00 * rows[i00] + w01 * rows[i00 + 1]
            + w10 * rows[i00 + stride] + w11 * rows[i00 + stride + 1])


def _scatter_np(out, i00, stride, fx, fy, g):
    w00 = ((1 - fy) * (1 - fx))[:, None]
    w01 = ((1 - fy) * fx)[:, None]
    w10 = (fy * (1 - fx))[:, None]
    w11 = (fy * fx)[:, None]
    np.add.at(out, i00, w00 * g)
    np.add.at(out, i00 + 1, w01 * g)
    np.add.at(out, i00 + stride, w10 * g)
    np.add.at(out, i00 + stride + 1, w11 * g)


def _uv_grad_np(rows, i00, stride, fx, fy, g, inx, iny, sx, sy):
    p00, p01 = rows[i00], rows[i00 + 1]
    p10, p11 = rows[i00 + stride], rows[i00 + stride + 1]
    dx = (p01 - p00) * (1 - fy)[:, None] + (p11 - p10) * fy[:, None]
    dy = (p10 - p00) * (1 - fx)[:, None] + (p11 - p01) * fx[:, None]
    gu = np.empty((i00.shape[0], 2), dtype=g.dtype)
    gu[:, 0] = (g * dx).sum(axis=1) * sx * inx
    gu[:, 1] = (g * dy).sum(axis=1) * sy * iny
    return gu


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _gather_nb(rows, i00, stride, fx, fy, out):
        n, c = out.shape
        for i in range(n):
            a = i00[i]
            w00 = (1.0 - fy[i]) * (1.0 - fx[i])
            w01 = (1.0 - fy[i]) * fx[i]
            w10 = fy[i] * (1.0 - fx[i])
            w11 = fy[i] * fx[i]
            for k in range(c):
                out[i, k] = (w00 * rows[a, k] + w01 * rows[a + 1, k]
                             + w10 * rows[a + stride, k] + w11 * rows[a + stride + 1, k])

    @numba.njit(cache=True)
    def _scatter_nb(out, i00, stride, fx, fy, g):
        n, c = g.shape
        for i in range(n):
            a = i00[i]
            w00 = (1.0 - fy[i]) * (1.0 - fx[i])
            w01 = (1.0 - fy[i]) * fx[i]
            w10 = fy[i] * (1.0 - fx[i])
            w11 = fy[i] * fx[i]
            for k in range(c):
                gv = g[i, k]
                out[a, k] += w00 * gv
                out[a + 1, k] += w01 * gv
                out[a + stride, k] += w10 * gv
                out[a + stride + 1, k] += w11 * gv

    @numba.njit(cache=True)
    def _uv_grad_nb(rows, i00, stride, fx, fy, g, inx, iny, sx, sy, gu):
        n, c = g.shape
        for i in range(n):
            a = i00[i]
            accx = 0.0
            accy = 0.0
            for k in range(c):
                dx = ((rows[a + 1, k] - rows[a, k]) * (1.0 - fy[i])
                      + (rows[a + stride + 1, k] - rows[a + stride, k]) * fy[i])
                dy = ((rows[a + stride, k] - rows[a, k]) * (1.0 - fx[i])
                      + (rows[a + stride + 1, k] - rows[a + 1, k]) * fx[i])
                accx += g[i, k] * dx
                accy += g[i, k] * dy
            gu[i, 0] = accx * sx * inx[i]
            gu[i, 1] = accy * sy * iny[i]


def bilinear_gather(rows, i00, stride, fx, fy):
    if _HAVE_NUMBA:
        out = np.empty((i00.shape[0], rows.shape[1]), dtype=rows.dtype)
        _gather_nb(rows, i00, stride, fx, fy, out)
        return out
    return _gather_np(rows, i00, stride, fx, fy)


def bilinear_scatter(out, i00, stride, fx, fy, g):
    if _HAVE_NUMBA:
        _scatter_nb(out, i00, stride, fx, fy, g)
    else:
        _scatter_np(out, i00, stride, fx, fy, g)


def bilinear_uv_grad(rows, i00, stride, fx, fy, g, inx, iny, sx, sy):
    if _HAVE_NUMBA:
        gu = np.empty((i00.shape[0], 2), dtype=g.dtype)
        _uv_grad_nb(rows, i00, stride, fx, fy, g,
                    inx.astype(g.dtype), iny.astype(g.dtype),
                    float(sx), float(sy), gu)
        return gu
    return _uv_grad_np(rows, i00, stride, fx, fy, g,
                       inx.astype(g.dtype), iny.astype(g.dtype), sx, sy)
