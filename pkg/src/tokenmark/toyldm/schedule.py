"""Noise schedule, closed-form forward noising, the deterministic DDIM update, CFG."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numgrad as ng
from ..numgrad import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] == 1``."""

    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, T: int = 50, start: float = 0.9999, end: float = 0.05) -> "NoiseSchedule":
        ab = np.empty(T + 1, dtype=np.float64)
        ab[0] = 1.0
        ab[1:] = np.linspace(start, end, T)
        return cls(ab)

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab[0] != 1.0 or not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise ValueError("alpha_bar must start at 1 and decrease strictly to a positive value")
        object.__setattr__(self, "alpha_bar", ab)


def add_forward_noise(z0, tau: int, eps, schedule: NoiseSchedule):
    """z_tau = sqrt(ab) * z0 + sqrt(1 - ab) * eps.  Works on arrays or Tensors."""
    if not 0 <= tau <= schedule.T:
        raise ValueError(f"timestep {tau} outside [0, {schedule.T}]")
    if np.shape(_data(z0)) != np.shape(_data(eps)):
        raise ng.ShapeError(f"add_forward_noise: z0 {np.shape(_data(z0))} vs eps {np.shape(_data(eps))}")
    ab = schedule.alpha_bar[tau]
    if tau == 0:
        return z0
    return _lin(z0, np.sqrt(ab), eps, np.sqrt(1.0 - ab))


def ddim_coefficients(t: int, schedule: NoiseSchedule, t_prev: int | None = None) -> tuple[float, float]:
    """(a, b) such that z_{t_prev} = a * z_t + b * eps_hat for the eta = 0 DDIM update.

    ``t_prev`` defaults to ``t - 1``; strided chains pass an earlier timestep.
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"DDIM step t={t} outside [1, {schedule.T}]")
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"DDIM target timestep {t_prev} must lie in [0, {t})")
    ab_t = schedule.alpha_bar[t]
    ab_p = schedule.alpha_bar[t_prev]
    a = np.sqrt(ab_p / ab_t)
    b = np.sqrt(ab_p) * (np.sqrt(1.0 / ab_p - 1.0) - np.sqrt(1.0 / ab_t - 1.0))
    return float(a), float(b)


def ddim_step(z_t, eps_hat, t: int, schedule: NoiseSchedule, t_prev: int | None = None):
    """Deterministic DDIM update z_t -> z_{t-1} (or z_{t_prev}); arrays or Tensors."""
    a, b = ddim_coefficients(t, schedule, t_prev)
    return _lin(z_t, a, eps_hat, b)


def cfg_combine(eps_uncond, eps_cond, w: float):
    """eps_uncond + w * (eps_cond - eps_uncond), evaluated as (1 - w) * u + w * c so w in {0, 1} is exact."""
    if np.shape(_data(eps_uncond)) != np.shape(_data(eps_cond)):
        raise ng.ShapeError(f"cfg_combine: {np.shape(_data(eps_uncond))} vs {np.shape(_data(eps_cond))}")
    if w < 0:
        raise ValueError("guidance scale must be >= 0")
    return _lin(eps_uncond, 1.0 - w, eps_cond, float(w))


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _lin(x, a: float, y, b: float):
    if isinstance(x, Tensor) or isinstance(y, Tensor):
        return ng.as_tensor(x) * a + ng.as_tensor(y) * b
    dt = np.result_type(x, y)
    return (x * dt.type(a) + y * dt.type(b)).astype(dt, copy=False)
