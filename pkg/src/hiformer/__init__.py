"""Heterogeneous feature-interaction layers for ranking models."""

__version__ = "0.1.0"
