"""Synthetic captioned shapes with exact object masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.86, 0.14, 0.12),
    "green": (0.16, 0.66, 0.22),
    "blue": (0.14, 0.26, 0.86),
    "yellow": (0.92, 0.82, 0.12),
}
SHAPES = ("circle", "square", "triangle")
IMAGE_SIZE = 32
LATENT_SIZE = 8
_SS = 4  # supersampling factor for anti-aliasing


@dataclass
class ShapesSample:
    image: np.ndarray  # (3, 32, 32) float32 in [0, 1]
    caption: str
    masks: np.ndarray  # (n_obj, 32, 32) bool
    masks_latent: np.ndarray  # (n_obj, 8, 8) bool
    objects: list[tuple[str, str]]


def _coverage(shape: str, cy: float, cx: float, size: float, n: int = IMAGE_SIZE) -> np.ndarray:
    """Fractional pixel coverage of a shape (anti-aliased by supersampling)."""
    m = n * _SS
    c = (np.arange(m) + 0.5) / _SS
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if shape == "circle":
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    elif shape == "square":
        inside = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    elif shape == "triangle":
        # apex up, base and height both 2 * size, centred on (cy, cx)
        top, bot = cy - size, cy + size
        half = (yy - top) / 2.0
        inside = (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(n, _SS, n, _SS).mean(axis=(1, 3))


def _area_to_size(shape: str, area: float) -> float:
    if shape == "circle":
        return float(np.sqrt(area / np.pi))
    if shape == "square":
        return float(np.sqrt(area) / 2.0)
    return float(np.sqrt(area / 2.0))  # triangle area = 2 * size^2


def _latent_mask(cov: np.ndarray) -> np.ndarray:
    f = IMAGE_SIZE // LATENT_SIZE
    cell = cov.reshape(LATENT_SIZE, f, LATENT_SIZE, f).mean(axis=(1, 3))
    m = cell >= 0.5
    if not m.any():
        m = cell == cell.max()
    return m


def _place(rng: np.random.Generator, shape: str, size: float) -> tuple[float, float]:
    lo, hi = size + 0.5, IMAGE_SIZE - size - 0.5
    return float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))


def _render(objs, bg: float, rng: np.random.Generator):
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), bg, dtype=np.float64)
    covs = []
    for (color, shape), (cy, cx, size) in objs:
        cov = _coverage(shape, cy, cx, size)
        rgb = np.clip(np.asarray(COLORS[color]) + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
        img = img * (1.0 - cov) + rgb[:, None, None] * cov
        covs.append(cov)
    # later objects occlude earlier ones in the image; masks keep full extents
    return img.astype(np.float32), covs


def make_sample(rng: np.random.Generator, two_objects: bool = False, overlap: bool = False) -> ShapesSample:
    bg = float(rng.uniform(0.78, 0.95))
    if not two_objects:
        color = COLORS_LIST[rng.integers(len(COLORS_LIST))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        size = _area_to_size(shape, rng.uniform(0.08, 0.30) * IMAGE_SIZE**2)
        cy, cx = _place(rng, shape, size)
        objs = [((color, shape), (cy, cx, size))]
    else:
        while True:
            picks = []
            while len(picks) < 2:
                p = (COLORS_LIST[rng.integers(len(COLORS_LIST))], SHAPES[rng.integers(len(SHAPES))])
                if p not in picks:
                    picks.append(p)
            objs = []
            for color, shape in picks:
                size = _area_to_size(shape, rng.uniform(0.06, 0.14) * IMAGE_SIZE**2)
                objs.append(((color, shape), (*_place(rng, shape, size), size)))
            cov = [_coverage(s, cy, cx, sz) for (_, s), (cy, cx, sz) in objs]
            a, b = cov[0] >= 0.5, cov[1] >= 0.5
            inter = (a & b).sum() / max(1, min(a.sum(), b.sum()))
            if overlap and inter >= 0.4:
                break
            if not overlap and _gap_ok(cov[0], cov[1]):
                break
    img, covs = _render(objs, bg, rng)
    masks = np.stack([c >= 0.5 for c in covs])
    masks_latent = np.stack([_latent_mask(c) for c in covs])
    names = [o[0] for o in objs]
    caption = " and ".join(f"a {c} {s}" for c, s in names)
    return ShapesSample(img, caption, masks, masks_latent, names)


def _gap_ok(c0: np.ndarray, c1: np.ndarray) -> bool:
    # require at least one clear pixel between objects
    m = np.pad(c0 > 0, 1)
    grown = np.zeros_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            grown |= np.roll(np.roll(m, dy, 0), dx, 1)
    return not (grown[1:-1, 1:-1] & (c1 > 0)).any()


COLORS_LIST = tuple(COLORS)


def make_shapes_dataset(
    n: int, seed: int, two_object_fraction: float = 0.5, overlap: bool = False
) -> list[ShapesSample]:
    """Deterministic corpus of ``n`` samples for a given seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        two = overlap or bool(rng.random() < two_object_fraction)
        out.append(make_sample(rng, two_objects=two, overlap=overlap))
    return out


def stack_images(samples: list[ShapesSample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def segment_color(image: np.ndarray, color: str, tol: float = 0.25) -> np.ndarray:
    """Boolean mask of pixels within ``tol`` (Euclidean RGB) of a palette colour.

    Generated images carry no synthesizer masks; this recovers the object
    region of a known colour for evaluation.
    """
    ref = np.asarray(COLORS[color], dtype=np.float32)[:, None, None]
    d = np.sqrt(((np.asarray(image, dtype=np.float32) - ref) ** 2).sum(axis=-3))
    return d <= tol
