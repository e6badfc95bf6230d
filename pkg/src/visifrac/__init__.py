"""Numerical laboratory for visible parts and slices of fractal sets."""

__version__ = "0.1.0"
