"""Temporal fusion of frustum point-cloud features for 3D object detection."""

__version__ = "0.1.0"
