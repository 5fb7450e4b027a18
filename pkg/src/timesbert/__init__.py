"""Desk-scale masked-patch and functional-token pre-training for multivariate time series."""

__version__ = "0.1.0"
