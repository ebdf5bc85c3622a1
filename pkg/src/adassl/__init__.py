"""Adversarial distribution alignment for semi-supervised learning on toy data."""

__version__ = "0.1.0"
