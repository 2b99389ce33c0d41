"""Shared training-loop plumbing: minibatching, divergence guard, logging."""

from __future__ import annotations

import logging
import time

import numpy as np

from ..numgrad import Adam, NonFiniteGradient

log = logging.getLogger("tokenmark.train")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient; ``last_good`` holds the last finite state."""

    def __init__(self, msg: str, last_good: dict[str, np.ndarray] | None = None, step: int = -1):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


def batches(n: int, batch: int, rng: np.random.Generator):
    """Endless shuffled index minibatches."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1, batch):
            yield perm[i : i + batch]


def guarded_step(opt: Adam, loss_value: float, step: int, snapshot) -> None:
    """Adam step that turns NaN/Inf into :class:`DivergenceError` carrying the last good state."""
    if not np.isfinite(loss_value):
        raise DivergenceError(f"non-finite loss at step {step}", snapshot(), step)
    try:
        opt.step()
    except NonFiniteGradient as e:
        raise DivergenceError(f"step {step}: {e}", snapshot(), step) from e


class Progress:
    def __init__(self, name: str, total: int, every: int = 200):
        self.name, self.total, self.every = name, total, every
        self.t0 = time.perf_counter()

    def __call__(self, step: int, **vals: float) -> None:
        if step % self.every == 0 or step == self.total - 1:
            msg = " ".join(f"{k}={v:.5g}" for k, v in vals.items())
            log.info("%s %d/%d %s (%.1fs)", self.name, step, self.total, msg, time.perf_counter() - self.t0)
