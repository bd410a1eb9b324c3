"""Perceptible backdoor attacks and their post-training detection on desk-scale CNNs."""

__version__ = "0.1.0"
