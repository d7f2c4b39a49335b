"""Representation-consistency pre-training for pixel-space diffusion and consistency models."""

__version__ = "0.1.0"
