"""Adversarial support sets for few-shot classifiers: attacks and self-similarity detection."""

__version__ = "0.1.0"
