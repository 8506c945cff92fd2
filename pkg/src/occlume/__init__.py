"""Occluded point cloud synthesis and robust classification under occlusion."""

__version__ = "0.1.0"
