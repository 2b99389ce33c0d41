"""Desk-scale in-generation watermarking of a toy latent diffusion model via a learned token."""

__version__ = "0.1.0"
