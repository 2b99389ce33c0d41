"""Hot inner loops: patch extraction / scatter for convolutions and bilinear sampling.

Each kernel has a numba ``@njit`` implementation and a pure-numpy one.  The numba
path is used when numba imports and ``TOKENMARK_NUMBA`` is not ``0``.  Both paths
produce identical results (the same arithmetic in the same order per element).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco if not args or not callable(args[0]) else args[0]


def numba_enabled() -> bool:
    return _HAVE_NUMBA and os.environ.get("TOKENMARK_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# im2col / col2im
#
# cols layout: (N * Ho * Wo, C * kh * kw), one row per output pixel, the column
# index runs over (c, i, j) in row-major order.
# ---------------------------------------------------------------------------


def _im2col_numpy(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def _col2im_numpy(cols, xp_shape, kh, kw, stride, ho, wo):
    n, c, hp, wp = xp_shape
    out = np.zeros(xp_shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += blocks[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


@njit(cache=True)
def _im2col_numba(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for y in range(ho):
            for x in range(wo):
                r = (b * ho + y) * wo + x
                k = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            cols[r, k] = xp[b, ch, y * stride + i, x * stride + j]
                            k += 1
    return cols


@njit(cache=True)
def _col2im_numba(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    # same (i, j) outer order as the numpy path so float sums match
    for i in range(kh):
        for j in range(kw):
            for b in range(n):
                for y in range(ho):
                    for x in range(wo):
                        r = (b * ho + y) * wo + x
                        for ch in range(c):
                            out[b, ch, y * stride + i, x * stride + j] += cols[r, (ch * kh + i) * kw + j]
    return out


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    if numba_enabled():
        return _im2col_numba(np.ascontiguousarray(xp), kh, kw, stride, ho, wo)
    return _im2col_numpy(xp, kh, kw, stride, ho, wo)


def col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    if numba_enabled():
        n, c, hp, wp = xp_shape
        return _col2im_numba(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw, stride, ho, wo)
    return _col2im_numpy(cols, xp_shape, kh, kw, stride, ho, wo)


# ---------------------------------------------------------------------------
# bilinear sampling at arbitrary source coordinates, zero outside the image
# ---------------------------------------------------------------------------


def _bilinear_numpy(img, ys, xs):
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.zeros((c,) + ys.shape, dtype=img.dtype)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy = y0 + dy
            xx = x0 + dx
            ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            val = np.where(ok, img[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)
            out += (wy * wx).astype(img.dtype) * val
    return out


@njit(cache=True)
def _bilinear_numba(img, ys, xs):
    c, h, w = img.shape
    oh, ow = ys.shape
    out = np.zeros((c, oh, ow), dtype=img.dtype)
    for p in range(oh):
        for q in range(ow):
            y = ys[p, q]
            x = xs[p, q]
            y0 = int(np.floor(y))
            x0 = int(np.floor(x))
            fy = y - y0
            fx = x - x0
            for dy in range(2):
                wy = fy if dy == 1 else 1.0 - fy
                yy = y0 + dy
                for dx in range(2):
                    wx = fx if dx == 1 else 1.0 - fx
                    xx = x0 + dx
                    if yy >= 0 and yy < h and xx >= 0 and xx < w:
                        wgt = img.dtype.type(wy * wx)
                        for ch in range(c):
                            out[ch, p, q] += wgt * img[ch, yy, xx]
    return out


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``img`` (C, H, W) at float pixel coordinates ``ys``/``xs`` (Ho, Wo)."""
    if numba_enabled():
        return _bilinear_numba(np.ascontiguousarray(img), ys.astype(np.float64), xs.astype(np.float64))
    return _bilinear_numpy(img, ys.astype(np.float64), xs.astype(np.float64))
