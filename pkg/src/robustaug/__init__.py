"""Adversarial training with data augmentation and weight averaging, at desk scale."""

__version__ = "0.1.0"
