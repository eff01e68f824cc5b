"""Adversarial reconstruction learning against model-inversion attacks, with a black-box evaluation suite."""

__version__ = "0.1.0"
