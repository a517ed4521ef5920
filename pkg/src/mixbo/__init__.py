"""Constrained batch Bayesian optimization for mixture design."""

__version__ = "0.1.0"
