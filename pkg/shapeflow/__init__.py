"""Optimal transport between shapes, Euler sprays and their numerical certificates."""

__version__ = "0.1.0"
