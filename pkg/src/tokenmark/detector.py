"""Differentiable bit detector D_w, its throwaway training embedder, and the binomial decision rule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import attacks
from . import numgrad as ng
from .numgrad import Tensor
from .toyldm.layers import Module
from .toyldm.train_util import Progress, batches, guarded_step

log = logging.getLogger(__name__)

K_MIN, K_MAX = 1, 128
DETECTOR_SIZE = 32


class InfeasibleThresholdError(ValueError):
    pass


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Detector(Module):
    """Conv stack + global average pool -> k logits."""

    def __init__(self, k: int = 48, width: int = 32, seed: int = 3):
        if not K_MIN <= k <= K_MAX:
            raise ValueError(f"key length {k} outside [{K_MIN}, {K_MAX}]")
        super().__init__(np.random.default_rng(seed))
        self.k, self.width = k, width
        w = width
        self.conv("c1", 3, w, 3)  # 32 -> 16
        self.conv("c2", w, 2 * w, 3)
        self.norm("n2", 2 * w)
        self.conv("c3", 2 * w, 2 * w, 3)  # 16 -> 8
        self.conv("c4", 2 * w, 2 * w, 3)
        self.norm("n4", 2 * w)
        self.conv("out", 2 * w, k, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = ng.silu(self.apply_conv("c1", x, stride=2))
        h = ng.silu(self.apply_gn("n2", self.apply_conv("c2", h), 8))
        h = ng.silu(self.apply_conv("c3", h, stride=2))
        h = ng.silu(self.apply_gn("n4", self.apply_conv("c4", h), 8))
        return self.apply_conv("out", h).mean(axis=(2, 3))


class Embedder(Module):
    """Key -> bounded additive residual built from one learned periodic tile per bit.

    The signed tiles are summed, squashed by tanh and repeated over the image.
    A periodic code lets any patch at least one period wide carry the whole key.
    """

    def __init__(self, k: int, tile: int = 8, strength: float = 0.06, seed: int = 4):
        super().__init__(np.random.default_rng(seed))
        self.k, self.tile, self.strength = k, tile, strength
        self.param("tiles", (k, 3 * tile * tile), std=1.0)

    def code(self, bits: np.ndarray, h: int, w: int) -> Tensor:
        n, t = len(bits), self.tile
        msg = ng.Tensor((2.0 * np.asarray(bits, dtype=np.float32) - 1.0) / np.sqrt(self.k))
        r = (msg @ self.params["tiles"]).reshape(n, 3, t, t)
        r = r[:, :, (np.arange(h) % t)[:, None], (np.arange(w) % t)[None, :]]
        return ng.tanh(r) * self.strength

    def __call__(self, x: Tensor, bits: np.ndarray) -> Tensor:
        return self.code(bits, *x.shape[-2:])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def to_detector_input(image) -> Tensor:
    """Batch-ify and bilinearly resize to 32x32 (differentiable when given a Tensor)."""
    x = image if isinstance(image, Tensor) else ng.Tensor(np.asarray(image, dtype=np.float32))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ng.ShapeError(f"detector expects (N, 3, H, W) images, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) != (DETECTOR_SIZE, DETECTOR_SIZE):
        x = resize_tensor(x, DETECTOR_SIZE, DETECTOR_SIZE)
    return x


def resize_tensor(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    ry = ng.Tensor(attacks.resize_matrix(h, out_h).astype(x.dtype))
    rxt = ng.Tensor(attacks.resize_matrix(w, out_w).T.astype(x.dtype))
    return ng.matmul(ng.matmul(ry, x), rxt)


def detector_logits(image, detector: Detector) -> Tensor:
    x = to_detector_input(image)
    return detector(x)


def detect_bits(image, detector: Detector) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N, k) or (k,) and hard bits; a logit of exactly 0 decodes to 0."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if not np.all(np.isfinite(arr)):
        raise ValueError("detect_bits: image contains non-finite pixels")
    single = arr.ndim == 3
    with ng.no_grad():
        logits = detector_logits(arr.astype(np.float32), detector).data
    bits = (logits > 0).astype(np.uint8)
    return (logits[0], bits[0]) if single else (logits, bits)


# ---------------------------------------------------------------------------
# decision rule
# ---------------------------------------------------------------------------


def binomial_tail(k: int, tau: int) -> Fraction:
    """P(Bin(k, 1/2) >= tau) as an exact fraction."""
    tau = max(tau, 0)
    return Fraction(sum(math.comb(k, j) for j in range(tau, k + 1)), 2**k)


def decision_threshold(k: int, fpr: float) -> int:
    """Smallest matched-bit count tau with P(Bin(k, 1/2) >= tau) <= fpr."""
    if not K_MIN <= k <= K_MAX:
        raise ValueError(f"k={k} outside [{K_MIN}, {K_MAX}]")
    if not 0 < fpr < 1:
        raise ValueError("fpr must lie in (0, 1)")
    target = Fraction(fpr)
    tail = 0
    total = 2**k
    # walk down from tau = k accumulating the tail; stop before it exceeds fpr
    best = None
    for tau in range(k, -1, -1):
        tail += math.comb(k, tau)
        if Fraction(tail, total) <= target:
            best = tau
        else:
            break
    if best is None:
        raise InfeasibleThresholdError(f"no threshold reaches FPR {fpr} with k={k} bits (min tail 2^-{k})")
    return best


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class DetectorConfig:
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-3
    width: int = 32
    # code amplitude, annealed geometrically from start_strength
    strength: float = 0.06
    start_strength: float = 0.2
    anneal: float = 0.6
    tile: int = 8
    # residual budget: MSE above 10^(-psnr/10) is penalized with this weight
    target_psnr: float = 31.0
    image_weight: float = 1000.0
    p_distort: float = 0.6
    patch_weight: float = 1.0  # relative frequency of the small-patch distortion
    seed: int = 0


def _reflect_pad(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[-2:]
    iy = attacks._reflect_index(h, r)
    ix = attacks._reflect_index(w, r)
    return x[:, :, iy[:, None], ix[None, :]]


def blur_tensor(x: Tensor, sigma: float) -> Tensor:
    k1 = attacks.gaussian_kernel1d(sigma)
    if k1.size == 1:
        return x
    r = k1.size // 2
    n, c, h, w = x.shape
    k2 = np.outer(k1, k1).astype(x.dtype)[None, None]
    xp = _reflect_pad(x, r).reshape(n * c, 1, h + 2 * r, w + 2 * r)
    return ng.conv2d(xp, ng.Tensor(k2)).reshape(n, c, h, w)


class Distortion:
    """Random differentiable distortion layer used while pretraining the detector."""

    KINDS = ("blur", "brightness", "contrast", "jpeg", "crop", "patch", "noise")

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def __call__(self, x: Tensor, kind: str) -> Tensor:
        rng = self.rng
        n, _, h, w = x.shape
        if kind == "blur":
            return blur_tensor(x, float(rng.uniform(0.4, 1.3)))
        if kind == "brightness":
            return x * float(rng.uniform(0.75, 1.3))
        if kind == "contrast":
            m = x.mean(axis=(1, 2, 3), keepdims=True)
            return m + (x - m) * float(rng.uniform(0.75, 1.3))
        if kind == "jpeg":
            q = float(rng.uniform(50, 95))
            target = attacks.jpeg_proxy(np.clip(x.data, 0, 1), q)
            return x + ng.Tensor(target - x.data)  # straight-through
        if kind in ("crop", "patch"):
            side = int(rng.integers(24, 31)) if kind == "crop" else int(rng.integers(10, 17))
            y0 = int(rng.integers(0, h - side + 1))
            x0 = int(rng.integers(0, w - side + 1))
            return resize_tensor(x[:, :, y0 : y0 + side, x0 : x0 + side], h, w)
        if kind == "noise":
            return x + ng.Tensor(rng.normal(0, 0.02, size=x.shape).astype(x.dtype))
        raise ValueError(kind)


def pretrain_detector(
    images: np.ndarray,
    k: int,
    config: DetectorConfig | None = None,
    history: list | None = None,
) -> Detector:
    """Jointly train a residual embedder and the decoder; return the frozen decoder.

    The trained embedder is attached as ``detector.embedder`` for evaluation only;
    it is not saved with the checkpoint.
    """
    cfg = config or DetectorConfig()
    if not K_MIN <= k <= K_MAX:
        raise ValueError(f"key length {k} outside [{K_MIN}, {K_MAX}]")
    rng = np.random.default_rng(cfg.seed)
    det = Detector(k, width=cfg.width, seed=cfg.seed + 3)
    emb = Embedder(k, tile=cfg.tile, strength=cfg.strength, seed=cfg.seed + 4)
    params = {**{f"det.{n}": p for n, p in det.params.items()}, **{f"emb.{n}": p for n, p in emb.params.items()}}
    opt = ng.Adam(params, lr=cfg.lr)
    distort = Distortion(rng)
    kinds = list(Distortion.KINDS)
    kind_p = np.array([cfg.patch_weight if kd == "patch" else 1.0 for kd in kinds])
    kind_p /= kind_p.sum()
    it = batches(len(images), cfg.batch, rng)
    prog = Progress(f"detector(k={k})", cfg.steps)
    for step in range(cfg.steps):
        x = ng.Tensor(images[next(it)])
        bits = rng.integers(0, 2, size=(cfg.batch, k))
        opt.zero_grad()
        # a strong code is found first, then its amplitude is annealed down to the final strength
        ramp = min(1.0, step / (cfg.anneal * cfg.steps))
        emb.strength = cfg.start_strength * (cfg.strength / cfg.start_strength) ** ramp
        marked = x + emb(x, bits)
        # distortions are phased in over the first third so the code is found on clean inputs first
        p_d = cfg.p_distort * min(1.0, 3.0 * step / cfg.steps)
        seen = distort(marked, kinds[rng.choice(len(kinds), p=kind_p)]) if rng.random() < p_d else marked
        logits = det(seen)
        loss_w = ng.bce_with_logits(logits, bits)
        loss_i = ((marked - x) ** 2).mean()
        loss = loss_w + ng.relu(loss_i - 10.0 ** (-cfg.target_psnr / 10.0)) * (cfg.image_weight * ramp)
        loss.backward()
        opt.state.lr = cfg.lr if step < 0.7 * cfg.steps else cfg.lr * 0.3
        guarded_step(opt, loss.item(), step, lambda: det.state_dict())
        if history is not None:
            history.append(float(loss_w.data))
        acc = float(((logits.data > 0) == bits).mean())
        prog(step, bce=float(loss_w.data), acc=acc, mse=float(loss_i.data))
    det.freeze()
    det.embedder = emb.freeze()  # kept only for evaluation of the pretraining contract
    return det
