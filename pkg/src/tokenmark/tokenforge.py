"""Training the watermark token embedding W* through the frozen Img2Img pipeline.

Per minibatch: encode images, forward-noise to tau*, then run two DDIM chains
from the same z_tau*: a reference chain on the plain caption and a watermarked
chain on the caption with W* appended.  Only W* receives gradients.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numgrad as ng
from .bench import checkpoint as ckpt
from .detector import Detector, detector_logits
from .numgrad import Tensor
from .toyldm.sampler import LDM, initial_noise, timestep_sequence
from .toyldm.schedule import add_forward_noise
from .toyldm.text import MAX_LEN, pad_ids, tokenize
from .toyldm.train_util import Progress, batches, guarded_step

log = logging.getLogger(__name__)


class KeyMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    tau: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 5e-3
    steps: int = 1500
    batch: int = 4
    seed: int = 0
    vectors: int = 1
    # optional early stop once the running watermark loss falls below this value
    stop_loss_w: float | None = None

    def check(self, T: int) -> None:
        if not 1 <= self.tau <= T:
            raise ValueError(f"tau*={self.tau} outside [1, {T}]")
        if self.alpha < 0 or self.beta < 0 or self.alpha == self.beta == 0:
            raise ValueError("alpha and beta must be >= 0 and not both zero")
        if self.steps < 0 or self.batch < 1 or self.vectors < 1:
            raise ValueError("steps >= 0, batch >= 1 and vectors >= 1 required")


@dataclass
class TokenEmbedding:
    """Learned W* vector(s) bound to one key."""

    vectors: np.ndarray  # (n, d)
    key: np.ndarray  # (k,) uint8
    tau: int = 8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float32))
        self.key = np.asarray(self.key, dtype=np.uint8)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("token embedding has non-finite entries")

    @property
    def k(self) -> int:
        return int(self.key.size)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "token.vectors": self.vectors,
            "token.key": self.key,
            "token.tau": np.asarray(self.tau, dtype=np.int64),
            "token.meta": ckpt.pack_json(self.meta),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TokenEmbedding":
        try:
            return cls(
                arrays["token.vectors"],
                arrays["token.key"],
                int(arrays["token.tau"]),
                ckpt.unpack_json(arrays["token.meta"]) if "token.meta" in arrays else {},
            )
        except KeyError as e:
            raise ckpt.CheckpointError(f"token file missing field {e}") from None

    def save(self, path):
        return ckpt.save_checkpoint(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "TokenEmbedding":
        return cls.from_arrays(ckpt.load_checkpoint(path))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_watermark(image_w, key: np.ndarray, detector: Detector) -> Tensor:
    """Mean BCE between detector logits on the watermarked image and the key bits."""
    key = np.asarray(key)
    if key.shape[-1] != detector.k:
        raise KeyMismatchError(f"key has {key.shape[-1]} bits, detector decodes {detector.k}")
    logits = detector_logits(image_w, detector)
    target = np.broadcast_to(key, logits.shape).astype(logits.dtype)
    return ng.bce_with_logits(logits, target)


def loss_latent(traj_w: list, traj_ref: list) -> Tensor:
    """Mean over chain steps of the mean squared latent difference."""
    if len(traj_w) != len(traj_ref) or not traj_w:
        raise ValueError(f"trajectory lengths differ or are empty: {len(traj_w)} vs {len(traj_ref)}")
    total = None
    for zw, zr in zip(traj_w, traj_ref):
        zw = ng.as_tensor(zw)
        zr = zr.data if isinstance(zr, Tensor) else np.asarray(zr)
        if zw.shape != zr.shape:
            raise ng.ShapeError(f"loss_latent: {zw.shape} vs {zr.shape}")
        term = ((zw - zr.astype(zw.dtype)) ** 2).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(traj_w))


# ---------------------------------------------------------------------------
# conditioning with W*
# ---------------------------------------------------------------------------


def insert_position(ids: np.ndarray) -> int:
    """Index of the first padding slot, where W* is appended."""
    ids = np.asarray(ids)
    n = int(np.count_nonzero(ids))
    if n != 0 and np.any(ids[:n] == 0):
        raise ValueError("prompt ids contain an interior null token")
    return n


def watermark_inserts(vectors, start: int) -> dict[int, Tensor]:
    vecs = vectors if isinstance(vectors, Tensor) else ng.Tensor(np.asarray(vectors, dtype=np.float32))
    n = vecs.shape[0]
    if start + n > MAX_LEN:
        raise ValueError(f"prompt of {start} tokens leaves no room for {n} watermark vector(s)")
    return {start + i: vecs[i] for i in range(n)}


def watermarked_context(ldm: LDM, ids: np.ndarray, vectors, batch: int) -> Tensor:
    ids = np.asarray(ids)
    rows = np.broadcast_to(ids, (batch, MAX_LEN)) if ids.ndim == 1 else ids
    starts = {insert_position(r) for r in rows}
    if len(starts) != 1:
        # captions of different lengths: encode row by row and stack
        return ng.concat([watermarked_context(ldm, r, vectors, 1) for r in rows], axis=0)
    return ldm.context(rows, batch, watermark_inserts(vectors, starts.pop()))


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------


def denoise_chain(ldm: LDM, z, t_start: int, ctx: Tensor, unc: Tensor) -> list:
    """Full-step DDIM from t_start down to 0; returns [z_t_start, ..., z_0]."""
    traj = [z]
    for t in range(t_start, 0, -1):
        z = ldm.ddim_update(z, ldm.eps(z, t, ctx, unc), t, t - 1)
        traj.append(z)
    return traj


def img2img_pair(ldm: LDM, images: np.ndarray, captions_ids: np.ndarray, vectors, tau: int, eps: np.ndarray):
    """Reference (no grad) and watermarked trajectories from one shared z_tau."""
    n = len(images)
    with ng.no_grad():
        z0 = ldm.vae.encode(ng.Tensor(images)).data
        unc = ldm.null_context(n)
        ctx_ref = ldm.context(captions_ids, n)
    z_tau = add_forward_noise(z0, tau, eps.astype(z0.dtype), ldm.schedule)
    with ng.no_grad():
        ref = [z.data for z in denoise_chain(ldm, ng.Tensor(z_tau), tau, ctx_ref, unc)]
    ctx_w = watermarked_context(ldm, captions_ids, vectors, n)
    wm = denoise_chain(ldm, ng.Tensor(z_tau), tau, ctx_w, unc)
    return wm, ref


def generate_training_mode(ldm: LDM, prompt: str, token: TokenEmbedding, seeds, tau: int | None = None) -> np.ndarray:
    """Text-to-image with W* switched on for t <= tau* (the training-time conditioning)."""
    seeds = [seeds] if np.isscalar(seeds) else list(seeds)
    n = len(seeds)
    tau = token.tau if tau is None else tau
    ids = ldm.prompt_ids(prompt)
    with ng.no_grad():
        ctx = ldm.context(ids, n)
        ctx_w = watermarked_context(ldm, ids, token.vectors, n)
        unc = ldm.null_context(n)
        z = ng.Tensor(initial_noise(seeds))
        for t in range(ldm.schedule.T, 0, -1):
            c = ctx_w if t <= tau else ctx
            z = ldm.ddim_update(z, ldm.eps(z, t, c, unc), t, t - 1)
        return ldm.decode(z).data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    token: TokenEmbedding
    loss: list[float] = field(default_factory=list)
    loss_w: list[float] = field(default_factory=list)
    loss_z: list[float] = field(default_factory=list)
    steps_run: int = 0


def _frozen_digest(ldm: LDM, detector: Detector) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for name, mod in (*ldm.modules().items(), ("detector", detector)):
        for k, v in sorted(mod.state_dict(name + ".").items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
    return h.digest()


def train_token(
    ldm: LDM,
    detector: Detector,
    images: np.ndarray,
    captions: list[str],
    key: np.ndarray,
    config: TrainConfig | None = None,
    init: np.ndarray | None = None,
) -> TrainResult:
    """Optimize W* = argmin alpha * L_w + beta * L_z with every other weight frozen."""
    cfg = config or TrainConfig()
    cfg.check(ldm.schedule.T)
    key = np.asarray(key, dtype=np.uint8)
    if key.size != detector.k:
        raise KeyMismatchError(f"key has {key.size} bits, detector decodes {detector.k}")
    rng = np.random.default_rng(cfg.seed)
    ids = np.stack([pad_ids(tokenize(c)) for c in captions])
    if init is None:
        # start from the null-token embedding plus a small perturbation
        init = ldm.text.null_embedding()[None] + 0.01 * rng.standard_normal((cfg.vectors, ldm.text.dim))
    w = ng.Tensor(np.asarray(init, dtype=np.float32).reshape(cfg.vectors, -1), requires_grad=True, name="W*")
    opt = ng.Adam({"W*": w}, lr=cfg.lr)
    before = _frozen_digest(ldm, detector)
    res = TrainResult(token=None)
    it = batches(len(images), cfg.batch, rng)
    prog = Progress(f"token(tau={cfg.tau})", cfg.steps, every=100)
    ema = None
    for step in range(cfg.steps):
        idx = next(it)
        eps = rng.standard_normal((len(idx), 4, 8, 8)).astype(np.float32)
        opt.zero_grad()
        wm, ref = img2img_pair(ldm, images[idx], ids[idx], w, cfg.tau, eps)
        lw = loss_watermark(ldm.decode(wm[-1]), key, detector)
        lz = loss_latent(wm, ref)
        loss = lw * cfg.alpha + lz * cfg.beta
        loss.backward()
        guarded_step(opt, float(loss.data), step, lambda: {"W*": w.data.copy()})
        res.loss.append(float(loss.data))
        res.loss_w.append(float(lw.data))
        res.loss_z.append(float(lz.data))
        res.steps_run = step + 1
        prog(step, loss=res.loss[-1], lw=res.loss_w[-1], lz=res.loss_z[-1])
        ema = res.loss_w[-1] if ema is None else 0.9 * ema + 0.1 * res.loss_w[-1]
        if cfg.stop_loss_w is not None and step >= 10 and ema < cfg.stop_loss_w:
            log.info("stopping at step %d: running L_w %.4f < %.4f", step, ema, cfg.stop_loss_w)
            break
    if _frozen_digest(ldm, detector) != before:
        raise RuntimeError("frozen model parameters changed during token training")
    meta = {k: v for k, v in asdict(cfg).items()}
    meta["steps_run"] = res.steps_run
    res.token = TokenEmbedding(w.data.copy(), key, cfg.tau, meta)
    return res


def evaluate_img2img(
    ldm: LDM, detector: Detector, token: TokenEmbedding, images: np.ndarray, captions: list[str], seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Watermarked and reference decodes of held-out images through the training pipeline."""
    rng = np.random.default_rng(seed)
    ids = np.stack([pad_ids(tokenize(c)) for c in captions])
    eps = rng.standard_normal((len(images), 4, 8, 8)).astype(np.float32)
    with ng.no_grad():
        wm, ref = img2img_pair(ldm, images, ids, token.vectors, token.tau, eps)
        return ldm.decode(wm[-1]).data, ldm.decode(ref[-1]).data


def sweep_timestep(
    ldm: LDM,
    detector: Detector,
    images: np.ndarray,
    captions: list[str],
    key: np.ndarray,
    taus,
    config: TrainConfig | None = None,
    evaluate=None,
) -> list[dict]:
    """Train one token per tau under an identical budget; ``evaluate(token) -> dict`` adds metrics."""
    base = config or TrainConfig()
    rows = []
    for tau in taus:
        cfg = TrainConfig(**{**asdict(base), "tau": int(tau)})
        res = train_token(ldm, detector, images, captions, key, cfg)
        row = {"tau": int(tau), "final_loss_w": res.loss_w[-1], "steps_run": res.steps_run}
        if evaluate is not None:
            row.update(evaluate(res.token))
        rows.append(row)
    return rows


__all__ = [
    "KeyMismatchError",
    "TokenEmbedding",
    "TrainConfig",
    "TrainResult",
    "denoise_chain",
    "evaluate_img2img",
    "generate_training_mode",
    "img2img_pair",
    "insert_position",
    "loss_latent",
    "loss_watermark",
    "sweep_timestep",
    "timestep_sequence",
    "train_token",
    "watermarked_context",
]
