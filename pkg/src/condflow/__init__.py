"""Conditional invertible neural networks with exact likelihoods."""

__version__ = "0.1.0"
