"""Stage orchestration with content-addressed caching.

Every stage output lives under ``<data_dir>/cache/<stage>-<hash>.ckpt`` where
the hash covers the config keys the stage (and everything upstream of it)
depends on, so sweeps reuse pretrained models.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..detector import Detector, DetectorConfig, Embedder, pretrain_detector
from ..tokenforge import TokenEmbedding, TrainConfig, train_token
from ..toyldm.denoiser import Denoiser
from ..toyldm.pretrain import DenoiserConfig, VaeConfig, encode_dataset, pretrain_denoiser, pretrain_vae
from ..toyldm.sampler import LDM
from ..toyldm.schedule import NoiseSchedule
from ..toyldm.text import TextEncoder
from ..toyldm.vae import VAE
from . import checkpoint as ckpt
from .config import RunConfig
from .dataset import ShapesSample, make_shapes_dataset, stack_images

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DATASET_KEYS = ("dataset_n", "dataset_seed", "heldout")
VAE_KEYS = DATASET_KEYS + ("vae_steps", "vae_batch", "vae_lr", "vae_width", "model_seed")
DEN_KEYS = VAE_KEYS + ("den_steps", "den_batch", "den_lr", "den_ch", "dropout")
DET_KEYS = VAE_KEYS + ("det_steps", "det_batch", "det_lr", "det_strength")


class MissingStageError(RuntimeError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"stage {stage!r} has no cached output at {path} and training is disabled")
        self.stage = stage


def make_key(k: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2, size=k).astype(np.uint8)


@dataclass
class Corpus:
    samples: list[ShapesSample]
    images: np.ndarray
    captions: list[str]
    heldout: int

    @property
    def train(self) -> slice:
        return slice(0, len(self.images) - self.heldout)

    @property
    def test(self) -> slice:
        return slice(len(self.images) - self.heldout, None)


# ---------------------------------------------------------------------------
# persistence of models
# ---------------------------------------------------------------------------


def save_vae(path, vae: VAE) -> Path:
    return ckpt.save_checkpoint(path, {**vae.state_dict("vae."), "meta.vae": ckpt.pack_json({"width": vae.width})})


def load_vae(path) -> VAE:
    arrays = ckpt.load_checkpoint(path)
    meta = ckpt.unpack_json(arrays["meta.vae"])
    return VAE(width=meta["width"]).load_state_dict(arrays, "vae.").freeze()


def save_denoiser(path, den: Denoiser, text: TextEncoder) -> Path:
    meta = ckpt.pack_json({"ch": den.ch})
    return ckpt.save_checkpoint(path, {**den.state_dict("den."), **text.state_dict("text."), "meta.den": meta})


def load_denoiser(path) -> tuple[Denoiser, TextEncoder]:
    arrays = ckpt.load_checkpoint(path)
    meta = ckpt.unpack_json(arrays["meta.den"])
    den = Denoiser(ch=meta["ch"]).load_state_dict(arrays, "den.").freeze()
    return den, TextEncoder().load_state_dict(arrays, "text.").freeze()


def save_detector(path, det: Detector) -> Path:
    meta = ckpt.pack_json({"k": det.k, "width": det.width})
    return ckpt.save_checkpoint(path, {**det.state_dict("det."), "meta.det": meta})


def load_detector(path) -> Detector:
    arrays = ckpt.load_checkpoint(path)
    meta = ckpt.unpack_json(arrays["meta.det"])
    return Detector(meta["k"], width=meta["width"]).load_state_dict(arrays, "det.").freeze()


def save_embedder(path, emb: Embedder, seconds: float | None = None) -> Path:
    """Pretraining embedder, kept beside the detector for evaluation only."""
    meta = ckpt.pack_json({"k": emb.k, "tile": emb.tile, "strength": emb.strength, "train_seconds": seconds})
    return ckpt.save_checkpoint(path, {**emb.state_dict("emb."), "meta.emb": meta})


def load_embedder(path) -> tuple[Embedder, dict]:
    arrays = ckpt.load_checkpoint(path)
    meta = ckpt.unpack_json(arrays["meta.emb"])
    emb = Embedder(meta["k"], tile=meta["tile"], strength=meta["strength"])
    return emb.load_state_dict(arrays, "emb.").freeze(), meta


# ---------------------------------------------------------------------------
# workspace
# ---------------------------------------------------------------------------


class Workspace:
    """Cached stage outputs for one data directory.

    ``train=False`` turns a cache miss into :class:`MissingStageError` instead
    of running the (slow) pretraining stage.
    """

    def __init__(self, config: RunConfig, train: bool = True):
        self.cfg = config
        self.root = config.resolved_data_dir()
        self.cache = self.root / "cache"
        self.train = train
        self.timing: dict[str, float] = {}
        self._memo: dict[str, object] = {}

    def path(self, stage: str, keys, extra: str = "") -> Path:
        return self.cache / f"{stage}-{self.cfg.digest(keys)}{extra}.ckpt"

    def _timed(self, stage: str, fn):
        t0 = time.perf_counter()
        out = fn()
        self.timing[stage] = self.timing.get(stage, 0.0) + time.perf_counter() - t0
        return out

    def _need(self, stage: str, path: Path) -> None:
        if not path.exists() and not self.train:
            raise MissingStageError(stage, path)

    # -- stages -------------------------------------------------------------------
    def corpus(self) -> Corpus:
        if "corpus" not in self._memo:
            c = self.cfg
            samples = self._timed("dataset", lambda: make_shapes_dataset(c.dataset_n, c.dataset_seed))
            self._memo["corpus"] = Corpus(samples, stack_images(samples), [s.caption for s in samples], c.heldout)
        return self._memo["corpus"]

    def vae_path(self) -> Path:
        return self.path("vae", VAE_KEYS)

    def vae(self) -> VAE:
        if "vae" in self._memo:
            return self._memo["vae"]
        p = self.vae_path()
        self._need("vae", p)
        if not p.exists():
            c = self.cfg
            corpus = self.corpus()
            cfg = VaeConfig(c.vae_steps, c.vae_batch, c.vae_lr, c.vae_width, c.model_seed)
            vae = self._timed("vae", lambda: pretrain_vae(corpus.images[corpus.train], cfg))
            save_vae(p, vae)
        self._memo["vae"] = load_vae(p)
        return self._memo["vae"]

    def denoiser_path(self) -> Path:
        return self.path("denoiser", DEN_KEYS)

    def denoiser(self) -> tuple[Denoiser, TextEncoder]:
        if "den" in self._memo:
            return self._memo["den"]
        p = self.denoiser_path()
        self._need("denoiser", p)
        if not p.exists():
            c = self.cfg
            corpus = self.corpus()
            vae = self.vae()
            lat = encode_dataset(vae, corpus.images[corpus.train])
            cfg = DenoiserConfig(c.den_steps, c.den_batch, c.den_lr, c.den_ch, c.dropout, c.model_seed)
            caps = corpus.captions[corpus.train]
            den, text = self._timed("denoiser", lambda: pretrain_denoiser(lat, caps, NoiseSchedule.linear(), cfg))
            save_denoiser(p, den, text)
        self._memo["den"] = load_denoiser(p)
        return self._memo["den"]

    def ldm(self) -> LDM:
        den, text = self.denoiser()
        return LDM(self.vae(), text, den, NoiseSchedule.linear(), guidance=self.cfg.guidance)

    def detector_path(self, k: int | None = None) -> Path:
        k = self.cfg.k if k is None else k
        return self.path("detector", DET_KEYS, f"-k{k}")

    def embedder_path(self, k: int | None = None) -> Path:
        k = self.cfg.k if k is None else k
        return self.path("embedder", DET_KEYS, f"-k{k}")

    def embedder(self, k: int | None = None) -> tuple[Embedder, dict]:
        """The discarded pretraining embedder and its meta (includes ``train_seconds``)."""
        p = self.embedder_path(k)
        if not p.exists():
            raise MissingStageError("embedder", p)
        return load_embedder(p)

    def detector(self, k: int | None = None) -> Detector:
        k = self.cfg.k if k is None else k
        name = f"det{k}"
        if name in self._memo:
            return self._memo[name]
        p = self.detector_path(k)
        self._need("detector", p)
        if not p.exists():
            c = self.cfg
            corpus = self.corpus()
            cfg = DetectorConfig(c.det_steps, c.det_batch, c.det_lr, strength=c.det_strength, seed=c.model_seed)
            t0 = time.perf_counter()
            det = self._timed("detector", lambda: pretrain_detector(corpus.images[corpus.train], k, cfg))
            save_embedder(self.embedder_path(k), det.embedder, time.perf_counter() - t0)
            save_detector(p, det)
        self._memo[name] = load_detector(p)
        return self._memo[name]

    def token(self, k: int | None = None, seed: int | None = None, **overrides) -> TokenEmbedding:
        """Trained W* for the run config, optionally with TrainConfig field overrides."""
        c = self.cfg
        k = c.k if k is None else k
        seed = c.seed if seed is None else seed
        tc = TrainConfig(c.tau, c.alpha, c.beta, c.lr, c.token_steps, c.token_batch, seed, c.vectors)
        for name, v in overrides.items():
            if not hasattr(tc, name):
                raise KeyError(f"unknown TrainConfig field {name!r}")
            setattr(tc, name, v)
        tag = ckpt.pack_json({"train": vars(tc), "k": k, "key_seed": c.key_seed}).tobytes()
        extra = "-" + hashlib.sha256(tag).hexdigest()[:12]
        p = self.path("token", DEN_KEYS + DET_KEYS + ("guidance",), extra)
        if not p.exists():
            self._need("token", p)
            corpus = self.corpus()
            tr = corpus.train
            t0 = time.perf_counter()
            res = self._timed(
                "token",
                lambda: train_token(
                    self.ldm(), self.detector(k), corpus.images[tr], corpus.captions[tr], make_key(k, c.key_seed), tc
                ),
            )
            res.token.meta["train_seconds"] = time.perf_counter() - t0
            res.token.meta["loss_w"] = res.loss_w
            res.token.meta["loss_z"] = res.loss_z
            res.token.save(p)
        return TokenEmbedding.load(p)


def frozen_checkpoint_paths(ws: Workspace) -> list[Path]:
    return [ws.vae_path(), ws.denoiser_path(), ws.detector_path()]
