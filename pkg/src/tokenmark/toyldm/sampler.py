"""Frozen LDM bundle: text conditioning, classifier-free guidance and the DDIM chain."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numgrad as ng
from ..numgrad import Tensor
from .denoiser import Denoiser
from .schedule import NoiseSchedule, cfg_combine, ddim_step
from .text import MAX_LEN, VOCAB, TextEncoder, pad_ids, tokenize
from .vae import VAE

LATENT_SHAPE = (4, 8, 8)


@dataclass
class AttentionStack:
    """Cross-attention maps of the conditional branch, one entry per denoising step.

    ``maps[i]`` has shape (N, L, 8, 8) and holds, for every latent location, the
    softmax weights over the L context tokens at timestep ``timesteps[i]``.
    """

    timesteps: list[int] = field(default_factory=list)
    maps: list[np.ndarray] = field(default_factory=list)
    tokens: list[str] = field(default_factory=list)

    def append(self, t: int, probs: np.ndarray) -> None:
        n, hw, l = probs.shape
        side = int(round(np.sqrt(hw)))
        self.timesteps.append(int(t))
        self.maps.append(probs.transpose(0, 2, 1).reshape(n, l, side, side).copy())

    def token_map(self, index: int | list[int], t: int | None = None) -> np.ndarray:
        """Map(s) of token column(s) summed, at timestep ``t`` (default: mean over steps)."""
        idx = [index] if isinstance(index, int) else list(index)
        if t is None:
            stack = np.stack(self.maps)
            return stack[:, :, idx].sum(axis=2).mean(axis=0)
        return self.maps[self.timesteps.index(t)][:, idx].sum(axis=1)

    def to_json(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "tokens": self.tokens,
            "maps": [m.round(6).tolist() for m in self.maps],
        }


class AttentionRecorder:
    """Attention control that leaves the computation unchanged and records the maps."""

    def __init__(self, stack: AttentionStack):
        self.stack = stack
        self.t = 0

    def __call__(self, block, q: Tensor, ctx: Tensor) -> Tensor:
        o, a = block.attend(q, ctx)
        self.stack.append(self.t, a.data)
        return o


def timestep_sequence(T: int, steps: int | None) -> list[int]:
    """Descending timesteps visited by a DDIM chain of ``steps`` updates, ending at 0."""
    steps = T if steps is None else steps
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}]")
    seq = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))[::-1]
    return [int(s) for s in seq]


def initial_noise(seeds, shape=LATENT_SHAPE) -> np.ndarray:
    """One standard-normal latent per seed, each from its own generator."""
    return np.stack([np.random.default_rng(int(s)).standard_normal(shape) for s in seeds]).astype(np.float32)


class LDM:
    """Frozen VAE + text encoder + denoiser + schedule."""

    def __init__(
        self,
        vae: VAE,
        text: TextEncoder,
        denoiser: Denoiser,
        schedule: NoiseSchedule | None = None,
        guidance: float = 5.0,
    ):
        self.vae, self.text, self.denoiser = vae, text, denoiser
        self.schedule = schedule if schedule is not None else NoiseSchedule.linear()
        self.guidance = guidance

    def freeze(self) -> "LDM":
        for m in (self.vae, self.text, self.denoiser):
            m.freeze()
        return self

    def modules(self) -> dict:
        return {"vae": self.vae, "text": self.text, "denoiser": self.denoiser}

    # -- conditioning ------------------------------------------------------------
    def prompt_ids(self, prompt: str | list[int]) -> np.ndarray:
        ids = tokenize(prompt) if isinstance(prompt, str) else list(prompt)
        return pad_ids(ids)

    def context(self, ids: np.ndarray, batch: int, inserts: dict[int, Tensor] | None = None) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = np.broadcast_to(ids, (batch, MAX_LEN))
        return self.text.encode(ids, inserts)

    def null_context(self, batch: int) -> Tensor:
        return self.text.null_context(batch)

    # -- noise prediction ----------------------------------------------------------
    def eps(self, z, t: int, ctx: Tensor, uncond: Tensor, control=None, guidance: float | None = None) -> Tensor:
        w = self.guidance if guidance is None else guidance
        e_u = self.denoiser(z, t, uncond)
        e_c = self.denoiser(z, t, ctx, control=control)
        return cfg_combine(e_u, e_c, w)

    def ddim_update(self, z, eps_hat, t: int, t_prev: int):
        return ddim_step(z, eps_hat, t, self.schedule, t_prev)

    def decode(self, z) -> Tensor:
        return self.vae.decode(z)

    def sample(
        self,
        prompt: str | list[int],
        seeds,
        steps: int | None = None,
        guidance: float | None = None,
        record: bool = True,
    ) -> tuple[np.ndarray, AttentionStack]:
        """Text-to-image generation; returns images (N, 3, 32, 32) in [0, 1] and attention maps."""
        seeds = [seeds] if np.isscalar(seeds) else list(seeds)
        n = len(seeds)
        ids = self.prompt_ids(prompt)
        stack = AttentionStack(tokens=[VOCAB[i] for i in ids])
        rec = AttentionRecorder(stack) if record else None
        ts = timestep_sequence(self.schedule.T, steps)
        with ng.no_grad():
            ctx = self.context(ids, n)
            unc = self.null_context(n)
            z = ng.Tensor(initial_noise(seeds))
            for t, t_prev in zip(ts[:-1], ts[1:]):
                if rec is not None:
                    rec.t = t
                e = self.eps(z, t, ctx, unc, control=rec, guidance=guidance)
                z = self.ddim_update(z, e, t, t_prev)
            img = self.decode(z).data
        return img, stack
