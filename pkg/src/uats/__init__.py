"""Uncertainty-aware temporal self-learning for multi-class segmentation."""

__version__ = "0.1.0"
