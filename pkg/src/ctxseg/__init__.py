"""Neighbourhood-memory attention for tiled-image semantic segmentation."""

__version__ = "0.1.0"
