"""Parameter containers and the handful of layers the toy models are built from."""

from __future__ import annotations

import numpy as np

from .. import numgrad as ng
from ..numgrad import Tensor


class Module:
    """Named, flat parameter store.

    Subclasses register parameters with :meth:`param`; names are dotted paths so
    checkpoints stay readable (``"enc.conv1.w"``).
    """

    def __init__(self, rng: np.random.Generator | None = None):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = rng if rng is not None else np.random.default_rng(0)

    def param(self, name: str, shape, std: float | None = None, value: float | None = None) -> Tensor:
        if value is not None:
            data = np.full(shape, value, dtype=np.float32)
        else:
            data = (self._rng.standard_normal(shape) * std).astype(np.float32)
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self.param(f"{name}.w", (cout, cin, k, k), std=np.sqrt(1.0 / (cin * k * k)))
        self.param(f"{name}.b", (cout,), value=0.0)

    def convt(self, name: str, cin: int, cout: int, k: int) -> None:
        # each output pixel of a stride-2, k=4 transposed conv sees cin * 4 taps
        self.param(f"{name}.w", (cin, cout, k, k), std=np.sqrt(1.0 / (cin * 4)))
        self.param(f"{name}.b", (cout,), value=0.0)

    def linear(self, name: str, fin: int, fout: int, bias: bool = True) -> None:
        self.param(f"{name}.w", (fin, fout), std=np.sqrt(1.0 / fin))
        if bias:
            self.param(f"{name}.b", (fout,), value=0.0)

    def norm(self, name: str, c: int) -> None:
        self.param(f"{name}.g", (c,), value=1.0)
        self.param(f"{name}.b", (c,), value=0.0)

    # -- state -----------------------------------------------------------------
    def freeze(self) -> "Module":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.params.values():
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v.data.copy() for k, v in self.params.items()}
        out.update({prefix + k: v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> "Module":
        for k, p in self.params.items():
            arr = state[prefix + k]
            if arr.shape != p.shape:
                raise ValueError(f"{prefix + k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=np.float32)
        for k in self.buffers:
            self.buffers[k] = np.asarray(state[prefix + k])
        return self

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- layer application ------------------------------------------------------
    def apply_conv(self, name: str, x: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
        w = self.params[f"{name}.w"]
        pad = w.shape[-1] // 2 if padding is None else padding
        return ng.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=pad)

    def apply_convt(self, name: str, x: Tensor) -> Tensor:
        return ng.conv_transpose2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=2, padding=1)

    def apply_linear(self, name: str, x: Tensor) -> Tensor:
        y = ng.matmul(x, self.params[f"{name}.w"])
        b = self.params.get(f"{name}.b")
        return y + b if b is not None else y

    def apply_gn(self, name: str, x: Tensor, groups: int) -> Tensor:
        return ng.group_norm(x, groups, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def apply_ln(self, name: str, x: Tensor) -> Tensor:
        return ng.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
