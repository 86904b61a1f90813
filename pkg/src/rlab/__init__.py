"""Numerical laboratory for Fourier extension estimates and CGO solutions."""

__version__ = "0.1.0"
