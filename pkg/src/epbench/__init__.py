"""Convolutional energy-based models trained by fixed-point contrastive
updates, plus an adversarial/corruption robustness benchmark around them."""

__version__ = "0.1.0"
