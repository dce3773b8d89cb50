"""Density-function certificates for reach-avoid properties of polynomial systems."""

__version__ = "0.1.0"
