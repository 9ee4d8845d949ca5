"""Attribute-conditioned sketch-to-photo GAN with quality-guided and identity-preserving losses."""

__version__ = "0.1.0"
