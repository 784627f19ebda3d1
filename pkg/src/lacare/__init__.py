"""Cascading refinement CNN for left atrium and atrial scar segmentation."""

__version__ = "0.1.0"
