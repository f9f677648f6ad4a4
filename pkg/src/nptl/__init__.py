"""Nonparametric transfer learning engine."""

__version__ = "0.1.0"
