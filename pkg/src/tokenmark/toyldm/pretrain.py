"""Pretraining of the VAE and of the text encoder + denoiser pair."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numgrad as ng
from .denoiser import Denoiser
from .schedule import NoiseSchedule
from .text import TextEncoder, pad_ids, tokenize
from .train_util import Progress, batches, guarded_step
from .vae import VAE


@dataclass
class VaeConfig:
    steps: int = 1500
    batch: int = 32
    lr: float = 2e-3
    width: int = 32
    seed: int = 0


@dataclass
class DenoiserConfig:
    steps: int = 5000
    batch: int = 32
    lr: float = 1e-3
    ch: int = 48
    dropout: float = 0.1
    seed: int = 0


def _lr_at(step: int, total: int, base: float) -> float:
    # flat, then linear decay to 10% over the last 30%
    frac = step / max(1, total)
    return base if frac < 0.7 else base * (1.0 - 0.9 * (frac - 0.7) / 0.3)


def psnr_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    mse = ((a.astype(np.float64) - b) ** 2).reshape(len(a), -1).mean(axis=1)
    return 10 * np.log10(1.0 / np.maximum(mse, 1e-10))


def pretrain_vae(images: np.ndarray, config: VaeConfig | None = None, history: list | None = None) -> VAE:
    """Fit the autoencoder with pixel MSE, then set the latent scale to unit std."""
    cfg = config or VaeConfig()
    if len(images) < cfg.batch:
        raise ValueError("dataset smaller than one batch")
    rng = np.random.default_rng(cfg.seed)
    vae = VAE(width=cfg.width, seed=cfg.seed)
    opt = ng.Adam(vae.params, lr=cfg.lr)
    prog = Progress("vae", cfg.steps)
    it = batches(len(images), cfg.batch, rng)
    for step in range(cfg.steps):
        x = ng.Tensor(images[next(it)])
        opt.zero_grad()
        r = vae.decode_raw(vae.encode_raw(x))
        loss = ((r - x) ** 2).mean()
        loss.backward()
        opt.state.lr = _lr_at(step, cfg.steps, cfg.lr)
        guarded_step(opt, float(loss.data), step, vae.state_dict)
        if history is not None:
            history.append(float(loss.data))
        prog(step, loss=float(loss.data))
    with ng.no_grad():
        z = np.concatenate([vae.encode_raw(ng.Tensor(images[i : i + 256])).data for i in range(0, len(images), 256)])
    vae.buffers["latent_scale"] = np.asarray(z.std(), dtype=np.float32)
    return vae.freeze()


def encode_dataset(vae: VAE, images: np.ndarray) -> np.ndarray:
    with ng.no_grad():
        return np.concatenate([vae.encode(ng.Tensor(images[i : i + 256])).data for i in range(0, len(images), 256)])


def caption_ids(captions: list[str]) -> np.ndarray:
    return np.stack([pad_ids(tokenize(c)) for c in captions])


def denoiser_loss(
    den: Denoiser, text: TextEncoder, z0: np.ndarray, ids: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule
) -> ng.Tensor:
    ab = schedule.alpha_bar[t].astype(np.float32)[:, None, None, None]
    zt = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    pred = den(ng.Tensor(zt), t, text.encode(ids))
    return ((pred - eps) ** 2).mean()


def pretrain_denoiser(
    latents: np.ndarray,
    captions: list[str],
    schedule: NoiseSchedule,
    config: DenoiserConfig | None = None,
    history: list | None = None,
) -> tuple[Denoiser, TextEncoder]:
    """Epsilon-prediction training with condition dropout (null prompt) for CFG."""
    cfg = config or DenoiserConfig()
    rng = np.random.default_rng(cfg.seed)
    den = Denoiser(ch=cfg.ch, seed=cfg.seed + 2)
    text = TextEncoder(seed=cfg.seed + 1)
    params = {**{f"den.{k}": v for k, v in den.params.items()}, **{f"text.{k}": v for k, v in text.params.items()}}
    opt = ng.Adam(params, lr=cfg.lr)
    all_ids = caption_ids(captions)
    prog = Progress("denoiser", cfg.steps)
    it = batches(len(latents), cfg.batch, rng)

    def snapshot():
        return {**den.state_dict("den."), **text.state_dict("text.")}

    for step in range(cfg.steps):
        idx = next(it)
        ids = all_ids[idx].copy()
        ids[rng.random(len(idx)) < cfg.dropout] = 0
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal(latents[idx].shape).astype(np.float32)
        opt.zero_grad()
        loss = denoiser_loss(den, text, latents[idx], ids, t, eps, schedule)
        loss.backward()
        opt.state.lr = _lr_at(step, cfg.steps, cfg.lr)
        guarded_step(opt, float(loss.data), step, snapshot)
        if history is not None:
            history.append(float(loss.data))
        prog(step, loss=float(loss.data))
    return den.freeze(), text.freeze()


def heldout_eps_loss(
    den: Denoiser, text: TextEncoder, latents: np.ndarray, captions: list[str], schedule, seed: int = 0
) -> tuple[float, float]:
    """(model loss, unconditional-mean baseline) on a held-out split with fixed noise/timesteps.

    The baseline predicts the per-timestep mean noise, i.e. zero, so its loss is E[eps^2].
    """
    rng = np.random.default_rng(seed)
    t = rng.integers(1, schedule.T + 1, size=len(latents))
    eps = rng.standard_normal(latents.shape).astype(np.float32)
    with ng.no_grad():
        loss = float(denoiser_loss(den, text, latents, caption_ids(captions), t, eps, schedule).data)
    return loss, float((eps.astype(np.float64) ** 2).mean())
