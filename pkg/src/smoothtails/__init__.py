"""Numerical laboratory for multivariate smoothing transforms and their heavy tails."""
__version__ = "0.1.0"
