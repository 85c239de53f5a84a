"""Deterministic approximate inference and MCMC benchmarking for
latent Gaussian count models."""

__version__ = "0.1.0"
