"""Latent diffusion for exchangeable gene-count sets."""

__version__ = "0.1.0"
