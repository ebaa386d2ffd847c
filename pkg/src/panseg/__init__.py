"""Pinhole-to-panoramic semantic segmentation domain adaptation, desk scale."""

__version__ = "0.1.0"
