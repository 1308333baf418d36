"""Bayesian GPLVM with mean-field, importance-weighted, and
annealed-importance-sampling inference backends."""

__version__ = "0.1.0"
