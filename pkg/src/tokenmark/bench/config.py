"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment.  Unknown keys are an error so
typos never silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

DATA_ENV = "TOKENMARK_DATA"


class ConfigError(ValueError):
    pass


def default_data_dir() -> Path:
    env = os.environ.get(DATA_ENV)
    return Path(env) if env else Path.home() / ".cache" / "tokenmark"


@dataclass
class RunConfig:
    seed: int = 0  # run seed: token training and generation
    model_seed: int = 0  # pretraining of the frozen models
    data_dir: str = ""
    out_dir: str = "runs"
    experiment: str = "table1"
    # dataset
    dataset_n: int = 4200
    dataset_seed: int = 0
    heldout: int = 200
    # autoencoder
    vae_steps: int = 1500
    vae_batch: int = 32
    vae_lr: float = 2e-3
    vae_width: int = 32
    # denoiser and text encoder
    den_steps: int = 4000
    den_batch: int = 32
    den_lr: float = 1e-3
    den_ch: int = 48
    dropout: float = 0.1
    guidance: float = 5.0
    # detector
    k: int = 16
    det_steps: int = 3000
    det_batch: int = 16
    det_lr: float = 1e-3
    det_strength: float = 0.06
    # token
    tau: int = 8
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 5e-3
    token_steps: int = 1500
    token_batch: int = 4
    vectors: int = 1
    key_seed: int = 1234
    # overlay
    alpha_ov: float = 1.0
    pi_mode: str = "step"
    ramp_start: float = 16.0
    ramp_width: float = 16.0
    # evaluation
    prompt: str = "a [red circle W*] and a blue square"
    eval_seeds: int = 16
    eval_images: int = 64
    attacks: str = "blur:1,brightness:1.2,contrast:1.2,jpeg:80,crop:0.1"
    crop_mode: str = "remove"
    fpr: float = 1e-3
    heatmap_patch: int = 10
    heatmap_stride: int = 2
    heatmap_sigma: float = 1.5
    # sweeps
    taus: str = "2,4,8,16,32"
    bits: str = "8,16,32,64"
    sweep_steps: int = 300  # token training steps per sweep point

    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else default_data_dir()

    def attack_list(self) -> list[str]:
        return [a.strip() for a in self.attacks.split(",") if a.strip()]

    def int_list(self, name: str) -> list[int]:
        return [int(v) for v in str(getattr(self, name)).split(",") if v.strip()]

    def check(self) -> None:
        if self.experiment not in ("table1", "table2", "bits", "tau"):
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.pi_mode not in ("step", "smooth"):
            raise ConfigError(f"unknown pi_mode {self.pi_mode!r}")
        if self.crop_mode not in ("remove", "keep"):
            raise ConfigError(f"unknown crop_mode {self.crop_mode!r}")
        if self.heldout >= self.dataset_n:
            raise ConfigError("heldout must be smaller than dataset_n")

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def digest(self, keys=None) -> str:
        """Hash of the listed keys (default: all) in canonical form."""
        d = asdict(self)
        keys = sorted(d) if keys is None else sorted(keys)
        text = "\n".join(f"{k}={d[k]!r}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        bad = set(kw) - {f.name for f in fields(self)}
        if bad:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(bad))}")
        cfg = RunConfig(**{**asdict(self), **kw})
        cfg.check()
        return cfg


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected 'key = value'")
        if key not in types:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, types[key], n)
    return (base or RunConfig()).replace(**values)


def _coerce(key: str, raw: str, typ, line: int):
    raw = raw.strip().strip('"')
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"line {line}: {key} expects a {typ}, got {raw!r}") from None
    return raw


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
