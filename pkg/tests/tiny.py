"""Small untrained models for fast structural tests."""

import numpy as np

from tokenmark.detector import Detector
from tokenmark.toyldm import LDM, VAE, Denoiser, TextEncoder


def tiny_ldm(guidance: float = 5.0) -> LDM:
    return LDM(VAE(width=8, seed=0), TextEncoder(seed=1), Denoiser(ch=16, seed=2), guidance=guidance).freeze()


def tiny_detector(k: int = 8) -> Detector:
    return Detector(k, width=8, seed=5).freeze()


def tiny_images(n: int, seed: int = 0) -> np.ndarray:
    from tokenmark.bench.dataset import make_shapes_dataset, stack_images

    s = make_shapes_dataset(n, seed)
    return stack_images(s), [x.caption for x in s]
