"""Adversarial training and shape/texture bias evaluation for small image classifiers."""

__version__ = "0.1.0"
