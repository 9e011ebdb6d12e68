"""Weakly-supervised domain adaptation for organelle segmentation, detection and counting."""
__version__ = "0.1.0"
