"""Prompt-guided patch UNet-VAE with adversarial supervision for small-organ
segmentation, plus phantom data, metrics and the synthetic:real ratio sweep."""

__version__ = "0.1.0"
