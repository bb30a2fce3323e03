"""Connectome-driven convolutional networks with contextual attention blocks."""

__version__ = "0.1.0"
