"""Desk-scale joint segmentation, detection and classification network."""

__version__ = "0.1.0"
