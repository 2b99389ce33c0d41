"""Watermark metrics and the sliding-patch bit-accuracy heatmap."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .attacks import AttackSpec, apply_attack, gaussian_blur
from .detector import InfeasibleThresholdError, decision_threshold, detect_bits

PSNR_CAP = 99.0


def bit_accuracy(m, m_hat):
    """Fraction of matching bits along the last axis (float for 1-D input)."""
    a, b = np.asarray(m), np.asarray(m_hat)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"key lengths differ: {a.shape[-1]} vs {b.shape[-1]}")
    acc = (a.astype(np.uint8) == b.astype(np.uint8)).mean(axis=-1)
    return float(acc) if np.ndim(acc) == 0 else acc


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical inputs give the 99 dB cap."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return 0.299 * img[..., 0, :, :] + 0.587 * img[..., 1, :, :] + 0.114 * img[..., 2, :, :]


def ssim(a, b, sigma: float = 1.5, win: int = 11) -> float:
    """Mean SSIM on luminance with a Gaussian window; window-affected borders are excluded."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    x, y = (luminance(a), luminance(b)) if a.ndim >= 3 else (a.astype(np.float64), b.astype(np.float64))
    if min(x.shape[-2:]) < win:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {win}x{win} SSIM window")
    c1, c2 = 0.01**2, 0.03**2
    truncate = ((win - 1) // 2 - 0.5) / sigma

    def filt(v):
        return ndimage.gaussian_filter(v, sigma, truncate=truncate, mode="reflect")

    def one(x, y):
        mx, my = filt(x), filt(y)
        vx = filt(x * x) - mx * mx
        vy = filt(y * y) - my * my
        cxy = filt(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        p = (win - 1) // 2
        return s[p:-p, p:-p].mean()

    if x.ndim == 2:
        return float(one(x, y))
    return float(np.mean([one(u, v) for u, v in zip(x.reshape(-1, *x.shape[-2:]), y.reshape(-1, *y.shape[-2:]))]))


def tpr_at_fpr(scores, k: int, fpr: float = 1e-3) -> float:
    """Fraction of watermarked matched-bit counts at or above the binomial threshold."""
    s = np.asarray(scores)
    if s.size == 0:
        raise ValueError("tpr_at_fpr: empty score set")
    return float(np.mean(s >= decision_threshold(k, fpr)))


def matched_bits(image, key, detector) -> np.ndarray:
    _, bits = detect_bits(image, detector)
    return (bits == np.asarray(key, dtype=np.uint8)).sum(axis=-1)


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


@dataclass
class HeatMap:
    values: np.ndarray  # normalized and smoothed, in [0, 1]
    raw: np.ndarray  # per-pixel accuracies before normalization (unvisited filled)
    patch: tuple[int, int]
    stride: int
    sigma: float
    degenerate: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "patch": list(self.patch),
                "stride": self.stride,
                "sigma": self.sigma,
                "degenerate": self.degenerate,
                "raw": np.round(self.raw, 6).tolist(),
                "values": np.round(self.values, 6).tolist(),
            }
        )


def patch_accuracy_grid(image, key, detector, patch=(10, 10), stride: int = 2, batch: int = 256):
    """Bit accuracy for each patch position; returns (acc grid, top-left rows, top-left cols)."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError("heatmap expects a single (3, H, W) image")
    ph, pw = patch
    h, w = img.shape[-2:]
    if ph > h or pw > w or ph < 1 or pw < 1:
        raise ValueError(f"patch {patch} does not fit inside a {h}x{w} image")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ys = np.arange(0, h - ph + 1, stride)
    xs = np.arange(0, w - pw + 1, stride)
    crops = np.stack([img[:, y : y + ph, x : x + pw] for y in ys for x in xs])
    key = np.asarray(key, dtype=np.uint8)
    accs = []
    for i in range(0, len(crops), batch):
        _, bits = detect_bits(crops[i : i + batch], detector)
        accs.append((bits == key).mean(axis=-1))
    return np.concatenate(accs).reshape(len(ys), len(xs)), ys, xs


def heatmap(image, key, detector, patch=(10, 10), stride: int = 2, sigma: float = 1.5) -> HeatMap:
    """Slide a patch, score its bit accuracy at the patch centre, fill, min-max normalize, smooth."""
    patch = (patch, patch) if np.isscalar(patch) else tuple(patch)
    img = np.asarray(image)
    h, w = img.shape[-2:]
    grid, ys, xs = patch_accuracy_grid(img, key, detector, patch, stride)
    field = np.full((h, w), np.nan)
    cy, cx = ys + patch[0] // 2, xs + patch[1] // 2
    field[np.ix_(cy, cx)] = grid
    visited = ~np.isnan(field)
    if not visited.all():
        _, (iy, ix) = ndimage.distance_transform_edt(~visited, return_indices=True)
        field = field[iy, ix]
    lo, hi = field.min(), field.max()
    degenerate = hi <= lo
    norm = field.copy() if degenerate else (field - lo) / (hi - lo)
    values = np.clip(gaussian_blur(norm, sigma), 0.0, 1.0) if sigma > 0 else norm
    return HeatMap(values, field, patch, stride, float(sigma), bool(degenerate))


def region_contrast(hm: HeatMap, mask) -> tuple[float, float]:
    """(mean inside, mean outside) of the normalized heatmap for a binary mask of the same size."""
    m = np.asarray(mask) > 0.5
    if m.shape != hm.values.shape:
        raise ValueError(f"mask {m.shape} vs heatmap {hm.values.shape}")
    if not m.any() or m.all():
        raise ValueError("mask must have both inside and outside pixels")
    return float(hm.values[m].mean()), float(hm.values[~m].mean())


# ---------------------------------------------------------------------------
# aggregate evaluation
# ---------------------------------------------------------------------------


def attack_sweep(images, key, detector, specs, crop_mode: str = "remove") -> dict[str, float]:
    """Mean bit accuracy per attack spec over a batch of images."""
    key = np.asarray(key, dtype=np.uint8)
    out = {}
    for spec in specs:
        spec = AttackSpec.parse(spec) if isinstance(spec, str) else spec
        attacked = apply_attack(np.asarray(images), spec, crop_mode)
        _, bits = detect_bits(attacked, detector)
        out[str(spec)] = float(np.mean(bit_accuracy(key, bits)))
    return out


def _tpr_or_none(scores, k: int, fpr: float):
    # short keys cannot reach small FPRs at all; the report then carries None
    try:
        return tpr_at_fpr(scores, k, fpr)
    except InfeasibleThresholdError:
        return None


def metric_report(watermarked, reference, key, detector, fpr: float = 1e-3, attacks=()) -> dict:
    """bit accuracy, PSNR, SSIM and TPR over a batch of watermarked / reference pairs."""
    wm, ref = np.asarray(watermarked), np.asarray(reference)
    key = np.asarray(key, dtype=np.uint8)
    _, bits = detect_bits(wm, detector)
    acc = bit_accuracy(key, bits)
    return {
        "bit_accuracy": float(np.mean(acc)),
        "psnr_db": float(np.mean([psnr(a, b) for a, b in zip(wm, ref)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(wm, ref)])),
        "tpr": _tpr_or_none((bits == key).sum(axis=-1), key.size, fpr),
        "fpr_target": fpr,
        "attacks": attack_sweep(wm, key, detector, attacks) if attacks else {},
    }
