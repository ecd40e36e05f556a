"""Learnable feature-perturbation defense, attack suite and experiment harness."""

__version__ = "0.1.0"
