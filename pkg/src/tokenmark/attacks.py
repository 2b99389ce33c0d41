"""Deterministic post-generation image transforms used to probe watermark robustness.

Images are float arrays in [0, 1], shaped (3, H, W) or (N, 3, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .numgrad import _kernels

KINDS = ("identity", "brightness", "contrast", "blur", "crop", "resize", "rotate", "jpeg")

# legal parameter ranges per kind, inclusive unless noted in _check
_RANGES = {
    "identity": (-math.inf, math.inf),
    "brightness": (0.0, 10.0),
    "contrast": (0.0, 10.0),
    "blur": (0.0, 10.0),
    "crop": (0.0, 1.0),
    "resize": (0.0, 10.0),
    "rotate": (-360.0, 360.0),
    "jpeg": (1.0, 100.0),
}


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    param: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "AttackSpec":
        """Parse ``"kind:param"`` (``"identity"`` may omit the parameter)."""
        kind, _, p = text.strip().partition(":")
        spec = cls(kind.strip().lower(), float(p) if p else 0.0)
        spec.check()
        return spec

    def check(self) -> None:
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        lo, hi = _RANGES[self.kind]
        p = self.param
        ok = lo <= p <= hi
        if self.kind in ("brightness", "resize"):
            ok = lo < p <= hi
        if self.kind == "crop":
            ok = lo <= p < hi
        if not ok or not math.isfinite(p) and self.kind != "identity":
            raise AttackError(f"{self.kind}: parameter {p} outside legal range [{lo}, {hi}]")

    def __str__(self) -> str:
        return f"{self.kind}:{self.param:g}"


# ---------------------------------------------------------------------------
# building blocks shared with the detector's differentiable distortion layer
# ---------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized taps of radius ceil(3 sigma); sigma == 0 gives the delta kernel."""
    if sigma <= 0:
        return np.ones(1)
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def resize_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) bilinear interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        s = (i + 0.5) * scale - 0.5
        s = min(max(s, 0.0), src - 1.0)
        i0 = int(math.floor(s))
        f = s - i0
        m[i, i0] += 1.0 - f
        if f > 0:
            m[i, min(i0 + 1, src - 1)] += f
    return m


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ry = resize_matrix(h, out_h).astype(img.dtype)
    rx = resize_matrix(w, out_w).astype(img.dtype)
    return ry @ img @ rx.T


def _reflect_index(n: int, r: int) -> np.ndarray:
    idx = np.arange(-r, n + r)
    idx = np.abs(idx)
    idx = np.where(idx >= n, 2 * (n - 1) - idx, idx)
    return np.clip(idx, 0, n - 1)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel1d(sigma)
    if k.size == 1:
        return img.copy()
    r = k.size // 2
    h, w = img.shape[-2:]
    x = img[..., _reflect_index(h, r), :]
    x = sum(k[i] * x[..., i : i + h, :] for i in range(k.size))
    x = x[..., :, _reflect_index(w, r)]
    x = sum(k[i] * x[..., :, i : i + w] for i in range(k.size))
    return x.astype(img.dtype)


# ---------------------------------------------------------------------------
# JPEG proxy: the lossy stage of baseline JPEG without entropy coding
# ---------------------------------------------------------------------------

LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
CHROMA_TABLE = np.full((8, 8), 99.0)
CHROMA_TABLE[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]


def quant_tables(quality: float) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= quality <= 100:
        raise AttackError(f"jpeg quality {quality} outside [1, 100]")
    s = (5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality) / 100.0
    return tuple(np.clip(np.floor(t * s + 0.5), 1, 255) for t in (LUMA_TABLE, CHROMA_TABLE))


def jpeg_proxy(image: np.ndarray, quality: float) -> np.ndarray:
    """RGB->YCbCr, 8x8 DCT, table quantization, inverse; result clipped to [0, 1]."""
    ql, qc = quant_tables(quality)
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 3
    if squeeze:
        img = img[None]
    n, _, h, w = img.shape
    ph, pw = -h % 8, -w % 8
    x = np.pad(img * 255.0, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    ycc = np.stack(
        [
            0.299 * r + 0.587 * g + 0.114 * b - 128.0,
            -0.168736 * r - 0.331264 * g + 0.5 * b,
            0.5 * r - 0.418688 * g - 0.081312 * b,
        ],
        axis=1,
    )
    hb, wb = ycc.shape[2] // 8, ycc.shape[3] // 8
    blocks = ycc.reshape(n, 3, hb, 8, wb, 8).transpose(0, 1, 2, 4, 3, 5)
    coef = dctn(blocks, axes=(-2, -1), norm="ortho")
    q = np.stack([ql, qc, qc])[None, :, None, None]
    coef = np.round(coef / q) * q
    blocks = idctn(coef, axes=(-2, -1), norm="ortho")
    ycc = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, 3, hb * 8, wb * 8)
    y, cb, cr = ycc[:, 0] + 128.0, ycc[:, 1], ycc[:, 2]
    rgb = np.stack([y + 1.402 * cr, y - 0.344136 * cb - 0.714136 * cr, y + 1.772 * cb], axis=1)
    out = np.clip(rgb[:, :, :h, :w] / 255.0, 0.0, 1.0).astype(image.dtype if hasattr(image, "dtype") else np.float32)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# geometric attacks
# ---------------------------------------------------------------------------


def crop_size(side: int, r: float, mode: str = "remove") -> int:
    """Side length kept by a centre crop that removes (or keeps) fraction ``r`` of the area."""
    keep = 1.0 - r if mode == "remove" else r
    return max(1, int(math.floor(side * math.sqrt(keep) + 1e-9)))


def center_crop(img: np.ndarray, r: float, mode: str = "remove") -> np.ndarray:
    h, w = img.shape[-2:]
    nh, nw = crop_size(h, r, mode), crop_size(w, r, mode)
    y0, x0 = (h - nh) // 2, (w - nw) // 2
    return img[..., y0 : y0 + nh, x0 : x0 + nw].copy()


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Bilinear rotation about the image centre; exposed corners are zero."""
    if degrees % 360 == 0:
        return img.copy()
    h, w = img.shape[-2:]
    # positive angles turn the content counter-clockwise on screen (y axis points down)
    th = -math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source location
    dy, dx = yy - cy, xx - cx
    sy = cy + c * dy - s * dx
    sx = cx + s * dy + c * dx
    if img.ndim == 3:
        return _kernels.bilinear_sample(img, sy, sx)
    return np.stack([_kernels.bilinear_sample(im, sy, sx) for im in img])


def apply_attack(image: np.ndarray, spec: AttackSpec | str, crop_mode: str = "remove") -> np.ndarray:
    if isinstance(spec, str):
        spec = AttackSpec.parse(spec)
    spec.check()
    img = np.asarray(image)
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise AttackError(f"expected (3, H, W) or (N, 3, H, W) image, got {img.shape}")
    k, p = spec.kind, spec.param
    if k == "identity" or (k in ("brightness", "contrast", "resize") and p == 1.0):
        out = img.copy()
    elif k == "brightness":
        out = img * img.dtype.type(p)
    elif k == "contrast":
        m = img.mean(axis=(-3, -2, -1), keepdims=True)
        out = m + img.dtype.type(p) * (img - m)
    elif k == "blur":
        out = gaussian_blur(img, p)
    elif k == "crop":
        out = center_crop(img, p, crop_mode)
    elif k == "resize":
        h, w = img.shape[-2:]
        nh, nw = int(round(p * h)), int(round(p * w))
        if min(nh, nw) < 4:
            raise AttackError(f"resize {p} gives {nh}x{nw}, below the 4 px minimum")
        out = bilinear_resize(img, nh, nw)
    elif k == "rotate":
        out = rotate(img, p)
    else:
        out = jpeg_proxy(img, p)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)
