"""Radar-only 3D object detection from projected 4D radar tensors."""

__version__ = "0.1.0"
