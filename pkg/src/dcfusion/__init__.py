"""Dual-camera reference-based face deblurring toolkit."""

__version__ = "0.1.0"
