"""Numerical laboratory for transmission problems on layered composite domains."""

__version__ = "0.1.0"
