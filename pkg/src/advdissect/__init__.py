"""Desk-scale toolkit: train small CNNs, attack them, dissect the attacks at the concept level."""

__version__ = "0.1.0"
