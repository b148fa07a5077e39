"""Photoacoustic training-image synthesis, U-Net quantification and rank-stability evaluation."""

__version__ = "0.1.0"
