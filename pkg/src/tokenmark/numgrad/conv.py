"""2-D convolution and transposed convolution on NCHW tensors (im2col + GEMM)."""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, _make


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. ``x`` (N, C, H, W), ``w`` (O, C, kh, kw), ``b`` (O,)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(o, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = gm @ wm
            gxp = _kernels.col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). ``w`` is (C_in, C_out, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    hp, wp = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ho, wo = hp - 2 * padding, wp - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves empty output")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.data.reshape(c, -1)
    cols = xm @ wm
    full = _kernels.col2im(cols, (n, o, hp, wp), kh, kw, stride, h, wd)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _kernels.im2col(gp, kh, kw, stride, h, wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2))
        if w.requires_grad:
            gw = (xm.T @ gcols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv_transpose2d")
