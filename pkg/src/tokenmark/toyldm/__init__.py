"""Toy latent diffusion model: autoencoder, causal text encoder, cross-attention denoiser, DDIM."""

from .denoiser import CrossAttention, Denoiser
from .sampler import LDM, AttentionRecorder, AttentionStack, initial_noise, timestep_sequence
from .schedule import NoiseSchedule, add_forward_noise, cfg_combine, ddim_coefficients, ddim_step
from .text import MAX_LEN, VOCAB, TextEncoder, UnknownTokenError, pad_ids, tokenize
from .vae import VAE

__all__ = [
    "LDM",
    "VAE",
    "VOCAB",
    "MAX_LEN",
    "AttentionRecorder",
    "AttentionStack",
    "CrossAttention",
    "Denoiser",
    "NoiseSchedule",
    "TextEncoder",
    "UnknownTokenError",
    "add_forward_noise",
    "cfg_combine",
    "ddim_coefficients",
    "ddim_step",
    "initial_noise",
    "pad_ids",
    "timestep_sequence",
    "tokenize",
]
