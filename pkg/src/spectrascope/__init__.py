"""Spectral analysis of class and cross-class structure in classifier curvature matrices."""

__version__ = "0.1.0"
