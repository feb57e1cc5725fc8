"""Latent user intent modeling for sequential recommenders."""

__version__ = "0.1.0"
