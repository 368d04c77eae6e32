"""Tabular latent-predictive representation learning: exact losses, closed forms, dynamics and a sampled agent."""

__version__ = "0.1.0"
