"""Dual stochastic graph convolutional networks for image-sequence classification."""

__version__ = "0.1.0"
