"""Amortized simulation-based Bayesian inference for compartmental epidemic models."""

__version__ = "0.1.0"
