"""Articulated object modeling from point cloud sequences with dynamic 3D Gaussians."""

__version__ = "0.1.0"
