"""Multiplier-method loss pinning and a desk-scale VAE trade-off testbed."""

__version__ = "0.1.0"
