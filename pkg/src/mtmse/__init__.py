"""Minimum team mean-squared error estimation and filtering."""

__version__ = "0.1.0"
