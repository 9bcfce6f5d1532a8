"""Gradient-balanced segmentation of thin tubular structures in 3D volumes."""

__version__ = "0.1.0"
