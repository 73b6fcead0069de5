"""Morphology-conditioned diffusion enhancement of multi-depth ultrasound coronal images."""

__version__ = "0.1.0"
