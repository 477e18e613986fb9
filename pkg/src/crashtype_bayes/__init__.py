"""Bayesian random-effect negative binomial models of approach-level crash types."""

__version__ = "0.1.0"
