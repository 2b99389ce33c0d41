"""Text-conditioned noise predictor over 4x8x8 latents with one cross-attention block."""

from __future__ import annotations

import numpy as np

from .. import numgrad as ng
from ..numgrad import Tensor
from .layers import Module, timestep_embedding
from .text import CONTEXT_DIM


class CrossAttention:
    """View over the denoiser's cross-attention weights, handed to attention controls."""

    def __init__(self, model: "Denoiser"):
        self.model = model
        self.dim = model.attn_dim
        self.scale = 1.0 / np.sqrt(model.attn_dim)

    def kv(self, ctx: Tensor) -> tuple[Tensor, Tensor]:
        return self.model.apply_linear("xattn.k", ctx), self.model.apply_linear("xattn.v", ctx)

    def probs(self, q: Tensor, k: Tensor) -> Tensor:
        """Attention maps (N, HW, L): softmax over tokens of q k^T / sqrt(d)."""
        return ng.softmax(ng.matmul(q, k.transpose(0, 2, 1)) * self.scale, -1)

    def attend(self, q: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor]:
        k, v = self.kv(ctx)
        a = self.probs(q, k)
        return ng.matmul(a, v), a


class Denoiser(Module):
    """Small U-shaped epsilon predictor.

    8x8 -> 4x4 -> 8x8 with a skip, then cross-attention to the text context
    at 8x8 and a final residual block.  ``control`` (optional) replaces the
    default attention computation: it is called as ``control(block, q, ctx)``
    and must return the attended values (N, HW, d).
    """

    def __init__(self, ch: int = 48, attn_dim: int = 64, tdim: int = 64, seed: int = 2):
        super().__init__(np.random.default_rng(seed))
        self.ch, self.attn_dim, self.tdim = ch, attn_dim, tdim
        c = ch
        self.linear("temb.1", tdim, tdim)
        self.linear("temb.2", tdim, tdim)
        self.conv("in", 4, c, 3)
        self._resblock("res1", c, c)
        self.conv("down", c, 2 * c, 3)
        self._resblock("res2", 2 * c, 2 * c)
        self.convt("up", 2 * c, c, 4)
        self.conv("merge", 2 * c, c, 1)
        self.norm("xattn.norm", c)
        self.linear("xattn.q", c, attn_dim, bias=False)
        self.linear("xattn.k", CONTEXT_DIM, attn_dim, bias=False)
        self.linear("xattn.v", CONTEXT_DIM, attn_dim, bias=False)
        self.linear("xattn.o", attn_dim, c)
        self._resblock("res3", c, c)
        self.norm("out.norm", c)
        self.conv("out", c, 4, 3)
        self.attn = CrossAttention(self)

    def _resblock(self, name: str, cin: int, cout: int) -> None:
        self.norm(f"{name}.n1", cin)
        self.conv(f"{name}.c1", cin, cout, 3)
        self.linear(f"{name}.t", self.tdim, cout)
        self.norm(f"{name}.n2", cout)
        self.conv(f"{name}.c2", cout, cout, 3)

    def _res(self, name: str, x: Tensor, temb: Tensor) -> Tensor:
        h = self.apply_conv(f"{name}.c1", ng.silu(self.apply_gn(f"{name}.n1", x, 8)))
        t = self.apply_linear(f"{name}.t", temb)
        h = h + t.reshape(t.shape[0], t.shape[1], 1, 1)
        h = self.apply_conv(f"{name}.c2", ng.silu(self.apply_gn(f"{name}.n2", h, 8)))
        return x + h

    def time_embedding(self, t, n: int) -> Tensor:
        ts = np.broadcast_to(np.asarray(t), (n,))
        e = ng.Tensor(timestep_embedding(ts, self.tdim))
        return self.apply_linear("temb.2", ng.silu(self.apply_linear("temb.1", e)))

    def __call__(self, z, t, ctx: Tensor, control=None) -> Tensor:
        z = ng.as_tensor(z)
        if z.ndim != 4 or z.shape[1:] != (4, 8, 8):
            raise ng.ShapeError(f"Denoiser expects latents (N, 4, 8, 8), got {z.shape}")
        n = z.shape[0]
        if ctx.shape[0] != n:
            raise ng.ShapeError(f"Denoiser: context batch {ctx.shape[0]} != latent batch {n}")
        temb = self.time_embedding(t, n)
        h1 = self._res("res1", self.apply_conv("in", z), temb)
        h2 = self._res("res2", self.apply_conv("down", h1, stride=2), temb)
        h = self.apply_conv("merge", ng.concat([ng.silu(self.apply_convt("up", h2)), h1], axis=1))
        # cross-attention over the text context at 8x8
        c = self.ch
        hn = self.apply_gn("xattn.norm", h, 8).reshape(n, c, 64).transpose(0, 2, 1)
        q = self.apply_linear("xattn.q", hn)
        if control is None:
            o, _ = self.attn.attend(q, ctx)
        else:
            o = control(self.attn, q, ctx)
        o = self.apply_linear("xattn.o", o).transpose(0, 2, 1).reshape(n, c, 8, 8)
        h = self._res("res3", h + o, temb)
        return self.apply_conv("out", ng.silu(self.apply_gn("out.norm", h, 8)))
