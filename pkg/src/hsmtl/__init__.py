"""Multitask spectral-spatial learning engine for hyperspectral scenes."""

__version__ = "0.1.0"
