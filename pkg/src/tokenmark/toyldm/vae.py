"""Convolutional autoencoder mapping 3x32x32 images to 4x8x8 latents."""

from __future__ import annotations

import numpy as np

from .. import numgrad as ng
from ..numgrad import Tensor
from .layers import Module

LATENT_CHANNELS = 4


class VAE(Module):
    """Deterministic image autoencoder.

    ``encode`` returns latents already divided by ``latent_scale`` so the
    diffusion model sees roughly unit-variance inputs.
    """

    def __init__(self, width: int = 32, seed: int = 0):
        super().__init__(np.random.default_rng(seed))
        w = width
        self.width = w
        self.conv("enc.c1", 3, w, 3)  # 32 -> 16 (stride 2)
        self.conv("enc.c2", w, w, 3)
        self.conv("enc.c3", w, 2 * w, 3)  # 16 -> 8 (stride 2)
        self.conv("enc.c4", 2 * w, 2 * w, 3)
        self.conv("enc.out", 2 * w, LATENT_CHANNELS, 1)
        self.conv("dec.in", LATENT_CHANNELS, 2 * w, 3)
        self.conv("dec.c1", 2 * w, 2 * w, 3)
        self.convt("dec.up1", 2 * w, w, 4)  # 8 -> 16
        self.conv("dec.c2", w, w, 3)
        self.convt("dec.up2", w, w, 4)  # 16 -> 32
        self.conv("dec.out", w, 3, 3)
        self.buffers["latent_scale"] = np.ones((), dtype=np.float32)

    @property
    def latent_scale(self) -> float:
        return float(self.buffers["latent_scale"])

    def encode_raw(self, x: Tensor) -> Tensor:
        h = ng.silu(self.apply_conv("enc.c1", x, stride=2))
        h = ng.silu(self.apply_conv("enc.c2", h))
        h = ng.silu(self.apply_conv("enc.c3", h, stride=2))
        h = ng.silu(self.apply_conv("enc.c4", h))
        return self.apply_conv("enc.out", h)

    def decode_raw(self, z: Tensor) -> Tensor:
        h = ng.silu(self.apply_conv("dec.in", z))
        h = ng.silu(self.apply_conv("dec.c1", h))
        h = ng.silu(self.apply_convt("dec.up1", h))
        h = ng.silu(self.apply_conv("dec.c2", h))
        h = ng.silu(self.apply_convt("dec.up2", h))
        return ng.sigmoid(self.apply_conv("dec.out", h))

    def encode(self, x) -> Tensor:
        x = ng.as_tensor(x)
        if x.shape[1:] != (3, 32, 32):
            raise ng.ShapeError(f"VAE.encode expects (N, 3, 32, 32), got {x.shape}")
        return self.encode_raw(x) * (1.0 / self.latent_scale)

    def decode(self, z) -> Tensor:
        z = ng.as_tensor(z)
        return self.decode_raw(z * self.latent_scale)

    def reconstruct(self, x) -> Tensor:
        return self.decode(self.encode(x))
