"""Collaborative filtering models and shrinkage analytics for sparse ratings."""

__version__ = "0.1.0"
