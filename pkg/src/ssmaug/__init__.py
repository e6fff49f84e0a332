"""Adversarial on-the-fly augmentation for image-to-shape-model regression."""

__version__ = "0.1.0"
