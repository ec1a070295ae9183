"""Structured differentiable ops: 2D convolution, bilinear upsampling,
and bilinear grid sampling (the plane-interpolation primitive)."""

from __future__ import annotations

import numpy as np

from ._kernels import bilinear_gather, bilinear_scatter, bilinear_uv_grad
from .autodiff import ShapeError, Tensor, _active_for, _emit, as_tensor


def _im2col(xd: np.ndarray, k: int, p: int) -> np.ndarray:
    """(H'*W', C*k*k) patch matrix of a zero-padded (C, H, W) input."""
    xp = np.pad(xd, ((0, 0), (p, p), (p, p))) if p else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    ho, wo = win.shape[1], win.shape[2]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, xd.shape[0] * k * k)


def _corr(xd: np.ndarray, wd: np.ndarray, p: int, cols: np.ndarray | None = None):
    cout, cin, k, _ = wd.shape
    ho, wo = xd.shape[1] + 2 * p - k + 1, xd.shape[2] + 2 * p - k + 1
    if cols is None:
        cols = _im2col(xd, k, p)
    y = (cols @ wd.reshape(cout, cin * k * k).T).T.reshape(cout, ho, wo)
    return y, cols


def conv2d(x, kernels, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (C_in, H, W) with ``kernels`` (C_out, C_in, k, k),
    stride 1, zero padding. ``padding=(k-1)//2`` preserves spatial shape."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    xd, wd = x.data, kernels.data
    if xd.ndim != 3 or wd.ndim != 4 or wd.shape[-1] != wd.shape[-2]:
        raise ShapeError("conv2d", xd.shape, wd.shape)
    cin, h, w = xd.shape
    cout, cin_k, k, _ = wd.shape
    if cin_k != cin:
        raise ShapeError("conv2d: channel mismatch", xd.shape, wd.shape)
    p = int(padding)
    ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input", xd.shape, wd.shape)

    tape = _active_for(x, kernels)
    y, cols = _corr(xd, wd, p, cols=None)
    out = Tensor(y)
    if tape is None:
        return out

    def _vjp(g):
        g2 = g.reshape(cout, ho * wo)
        gw = (g2 @ cols).reshape(wd.shape)
        # input gradient = full correlation of g with the rotated kernel
        w_rot = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx, _ = _corr(g, w_rot, k - 1 - p)
        return gx, gw

    return _emit(tape, out, (x, kernels), _vjp)


_INTERP_CACHE: dict = {}


def _interp_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """(factor*n_in, n_in) bilinear interpolation matrix, align_corners=False:
    output sample o reads input coordinate (o + 0.5)/factor - 0.5, clamped."""
    key = (n_in, factor, np.dtype(dtype).name)
    m = _INTERP_CACHE.get(key)
    if m is not None:
        return m
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(src.astype(int), max(n_in - 2, 0))
    f = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), i0] += 1.0 - f
    m[np.arange(n_out), np.minimum(i0 + 1, n_in - 1)] += f
    _INTERP_CACHE[key] = m
    return m


def upsample_bilinear2d(x, factor: int = 2) -> Tensor:
    """Bilinearly upsample (C, H, W) -> (C, factor*H, factor*W),
    align_corners=False convention (see ``_interp_matrix``)."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError("upsample_bilinear2d", xd.shape)
    _, h, w = xd.shape
    my = _interp_matrix(h, factor, xd.dtype)
    mx = _interp_matrix(w, factor, xd.dtype)
    y = np.matmul(np.matmul(my, xd), mx.T)
    out = Tensor(y)

    tape = _active_for(x)
    if tape is None:
        return out

    def _vjp(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _emit(tape, out, (x,), _vjp)


def grid_sample_bilinear(plane, uv) -> Tensor:
    """Sample ``plane`` (C, H, W) at ``uv`` (N, 2) in [-1, 1]^2 -> (N, C).

    uv[:, 0] indexes the last (W) axis, uv[:, 1] the H axis; u = -1 and
    u = +1 land exactly on the first/last grid node (align-corners
    mapping). Out-of-range queries clamp to the border, where the
    gradient w.r.t. uv is zero. Each query's plane gradient touches at
    most the 4 enclosing cells per channel.
    """
    plane, uv = as_tensor(plane), as_tensor(uv)
    pd, ud = plane.data, uv.data
    if pd.ndim != 3 or ud.ndim != 2 or ud.shape[1] != 2:
        raise ShapeError("grid_sample_bilinear", pd.shape, ud.shape)
    c, h, w = pd.shape

    sx = 0.5 * (w - 1)
    sy = 0.5 * (h - 1)
    px = (ud[:, 0] + 1.0) * sx
    py = (ud[:, 1] + 1.0) * sy
    inx = (px > 0.0) & (px < w - 1)  # interior: nonzero d/du
    iny = (py > 0.0) & (py < h - 1)
    px = np.clip(px, 0.0, w - 1.0)
    py = np.clip(py, 0.0, h - 1.0)
    x0 = np.minimum(px.astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(py.astype(np.int64), max(h - 2, 0))
    fx = (px - x0).astype(pd.dtype)
    fy = (py - y0).astype(pd.dtype)
    i00 = y0 * w + x0

    rows = np.ascontiguousarray(pd.reshape(c, h * w).T)  # (H*W, C)
    out = Tensor(bilinear_gather(rows, i00, w, fx, fy))

    tape = _active_for(plane, uv)
    if tape is None:
        return out

    plane_taped = plane.tape is tape
    uv_taped = uv.tape is tape

    def _vjp(g):
        g = np.ascontiguousarray(g)
        gp = None
        if plane_taped:
            gp2 = np.zeros((h * w, c), dtype=g.dtype)
            bilinear_scatter(gp2, i00, w, fx, fy, g)
            gp = np.ascontiguousarray(gp2.T).reshape(c, h, w)
        gu = None
        if uv_taped:
            gu = bilinear_uv_grad(rows, i00, w, fx, fy, g, inx, iny, sx, sy)
        return gp, gu

    return _emit(tape, out, (plane, uv), _vjp)
